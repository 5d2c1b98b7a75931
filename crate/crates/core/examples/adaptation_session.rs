//! Detection followed by adaptation: novel queries are forwarded and
//! buffered until the new representative settles, then a new local model
//! joins the ensemble. The ablation keeps predicting with its old models.

use querydrift::simulator::{drift_inputs, run_drift, DriftConfig};

fn main() -> querydrift::Result<()> {
    let cfg = DriftConfig::default();
    let run = run_drift(&drift_inputs(&cfg)?, cfg.engine)?;
    let s = &run.summary;
    println!("drift injected at t = {}, detected at {:?}", s.t_drift_true, s.t_d);
    println!(
        "session finalized at {:?} after {} forwarded queries",
        s.t_finalize, s.forwarded
    );
    println!("representatives: {} -> {}", s.k_before, s.k_after);
    println!("median relative error before drift:        {:.5}", s.pre_drift_error);
    println!(
        "median relative error after finalizing:    {:.5}",
        s.post_finalize_error.unwrap_or(f64::NAN)
    );
    println!("median relative error without adaptation:  {:.5}", s.ablation_error);
    for c in run.adaptive.cycles() {
        println!(
            "cycle: t_detect {} t_finalize {} forwarded {} K {} -> {}",
            c.t_detect, c.t_finalize, c.forwarded, c.k_before, c.k_after
        );
    }
    Ok(())
}
