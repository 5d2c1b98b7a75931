//! Federation runs over the query-space workload: reciprocity accounting,
//! the execution-rate bound, and the number of affiliates a cycle sees
//! against what independent buffering would predict.

use querydrift::engine::Mode;
use querydrift::simulator::{federation_scripts, run_federation, FederationConfig, FederationRun, QuerySpaces};

fn config(n: usize, seed: u64) -> FederationConfig {
    FederationConfig {
        n,
        segments: 40,
        seed,
        ..FederationConfig::default()
    }
}

fn run(spaces: &QuerySpaces, cfg: &FederationConfig) -> FederationRun {
    let scripts = federation_scripts(cfg).unwrap();
    run_federation(spaces, &scripts, cfg).unwrap()
}

fn buffering(run: &FederationRun) -> Vec<Vec<bool>> {
    run.devices
        .iter()
        .map(|d| d.metrics().iter().map(|m| m.mode == Mode::Buffering).collect())
        .collect()
}

/// Observed and expected affiliate counts at every cycle start. The
/// expectation sums each other device's buffering fraction over a window
/// of one segment centred on the start.
fn affiliate_samples(run: &FederationRun, half_window: usize) -> Vec<(f64, f64)> {
    let modes = buffering(run);
    let rounds = modes[0].len();
    let mut out = Vec::new();
    for (i, dev) in run.devices.iter().enumerate() {
        for cycle in dev.cycles() {
            let r = cycle.t_detect - 1;
            let window = r.saturating_sub(half_window)..(r + half_window).min(rounds);
            let mut observed = 0.0;
            let mut expected = 0.0;
            for (_, m) in modes.iter().enumerate().filter(|&(j, _)| j != i) {
                observed += f64::from(u8::from(m[r]));
                let on = m[window.clone()].iter().filter(|&&b| b).count();
                expected += on as f64 / window.len() as f64;
            }
            out.push((observed, expected));
        }
    }
    out
}

#[test]
fn affiliates_match_independent_buffering() {
    let base = config(8, 5);
    let spaces = QuerySpaces::generate(&base.spaces).unwrap();
    let mut samples = Vec::new();
    for seed in [5, 6] {
        let cfg = config(8, seed);
        let run = run(&spaces, &cfg);
        assert!(run.stats.summary.reciprocity_ok);
        samples.extend(affiliate_samples(&run, cfg.segment_len / 2));
    }
    let n = samples.len() as f64;
    assert!(n >= 50.0, "only {n} cycles");
    let diffs: Vec<f64> = samples.iter().map(|(o, e)| o - e).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let z = mean / (var / n).sqrt();
    assert!(
        z.abs() <= 3.0,
        "observed - expected affiliates {mean:.3} (z = {z:.2}, {n} cycles)"
    );
}

#[test]
fn execution_rate_respects_bound_across_seeds() {
    let spaces = QuerySpaces::generate(&config(2, 0).spaces).unwrap();
    for seed in [11, 12] {
        for n in [2, 4] {
            let cfg = FederationConfig {
                segments: 10,
                ..config(n, seed)
            };
            let s = run(&spaces, &cfg).stats.summary;
            assert!(s.reciprocity_ok, "n={n} seed={seed}");
            assert!(
                s.execution_rate <= s.bound + 0.03,
                "n={n} seed={seed}: rate {} bound {}",
                s.execution_rate,
                s.bound
            );
            let calls: usize = s.devices.iter().map(|d| d.oracle_calls).sum();
            assert_eq!(calls, s.executions);
        }
    }
}
