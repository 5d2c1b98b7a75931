//! Likelihood-ratio CUSUM over the distance-based error proxy: a device
//! that never adapts watches its statistic climb once queries move to an
//! unseen region.

use querydrift::datamodel::{execute_exact, RangeQuery};
use querydrift::engine::{to_pairs, AnalystDevice, EngineConfig};
use querydrift::simulator::{drift_inputs, DriftConfig};

fn main() -> querydrift::Result<()> {
    let cfg = DriftConfig::default();
    let inputs = drift_inputs(&cfg)?;
    let domain = inputs.table.domain().to_vec();
    let pairs = to_pairs(inputs.bootstrap.iter().map(|q| (&q.predicates, q.answer)), &domain)?;
    let agg = inputs.bootstrap[0].agg;
    let engine = EngineConfig {
        adapt: false,
        ..cfg.engine
    };
    let mut device = AnalystDevice::bootstrap(domain, &pairs, engine)?;

    let det = device.detector();
    println!(
        "expected proxy ~ Gamma(shape {:.3}, scale {:.3}), novel ~ Gamma(shape {:.3}, scale {:.3}), h = {:.3}",
        det.p0().shape,
        det.p0().scale,
        det.p1().shape,
        det.p1().scale,
        det.h()
    );

    let oracle = |q: &RangeQuery| execute_exact(&inputs.table, q, &agg);
    for q in inputs.known.iter().chain(&inputs.novel).take(cfg.pre_drift + 10) {
        device.answer(&q.predicates, oracle)?;
    }
    println!("novel queries start at t = {}", cfg.pre_drift + 1);
    for m in &device.metrics()[cfg.pre_drift - 3..] {
        println!(
            "t {:>3}  proxy {:>10.4}  G {:>9.3}",
            m.t,
            m.u_tilde.unwrap_or(f64::NAN),
            m.g.unwrap_or(f64::NAN)
        );
    }
    println!("detections: {:?}", device.detections());
    Ok(())
}
