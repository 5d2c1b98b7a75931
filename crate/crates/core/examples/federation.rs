//! Several devices sharing one central system: every execution done for
//! one device is offered to the others that are adapting at the time,
//! and the central execution rate stays under its bound.

use querydrift::simulator::{
    execution_bound, federation_scripts, run_federation, FederationConfig, QuerySpaces, SpacesConfig,
};

fn main() -> querydrift::Result<()> {
    let spaces_cfg = SpacesConfig {
        k_spaces: 8,
        pool_per_space: 1_200,
        bootstrap_share: 400,
        probe_share: 200,
        ..SpacesConfig::default()
    };
    let spaces = QuerySpaces::generate(&spaces_cfg)?;
    for n in [1, 2, 4] {
        let cfg = FederationConfig {
            n,
            segments: 8,
            spaces: spaces_cfg.clone(),
            ..FederationConfig::default()
        };
        let scripts = federation_scripts(&cfg)?;
        let s = run_federation(&spaces, &scripts, &cfg)?.stats.summary;
        println!(
            "n = {n}: buffering {:.3}, execution rate {:.4} (bound {:.4}), affiliate pairs accepted {}",
            s.beta_hat,
            s.execution_rate,
            execution_bound(s.lambda, s.beta_hat, n),
            s.affiliates_accepted
        );
        for d in &s.devices {
            println!(
                "   device {}: K {} -> {}, {} cycles, {} executions",
                d.device,
                d.k_initial,
                d.final_k,
                d.cycles.len(),
                d.oracle_calls
            );
        }
    }
    Ok(())
}
