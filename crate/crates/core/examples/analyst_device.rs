//! The analyst device end to end: bootstrap from executed queries, answer
//! locally, persist and restore, and export the per-query log.

use querydrift::datamodel::{execute_exact, AggFn, AggregateSpec, RangeQuery};
use querydrift::engine::{to_pairs, AnalystDevice, EngineConfig};
use querydrift::regressors::ModelSpec;
use querydrift::workloads::{gen_query_workload, gen_uniform_table, QueryGenConfig, SyntheticDataConfig};

fn main() -> querydrift::Result<()> {
    let table = gen_uniform_table(&SyntheticDataConfig::new(4, 30_000, 3))?;
    let agg = AggregateSpec::new(AggFn::Avg, 3);
    let queries = gen_query_workload(&table, &QueryGenConfig::new(1_200, 2, 9), &agg)?;
    let (history, live) = queries.split_at(1_000);
    let pairs = to_pairs(history.iter().map(|q| (&q.predicates, q.answer)), table.domain())?;
    let cfg = EngineConfig {
        vigilance: Some(10.0),
        model: ModelSpec::ridge(),
        ..EngineConfig::default()
    };
    let mut device = AnalystDevice::bootstrap(table.domain().to_vec(), &pairs, cfg)?;
    println!("bootstrapped with K = {} clusters", device.codebook().len());

    let oracle = |q: &RangeQuery| execute_exact(&table, q, &agg);
    for q in &live[..5] {
        let a = device.answer(&q.predicates, oracle)?;
        println!("{:?}: {:.3} (exact {:.3})", a.provenance, a.value, q.answer);
    }

    let saved = device.to_json()?;
    let restored = AnalystDevice::from_json(&saved)?;
    let q = &live[5].predicates;
    assert_eq!(device.predict(q)?, restored.predict(q)?);
    println!("state round-trips through {} bytes of JSON", saved.len());

    let mut log = Vec::new();
    device.write_metrics_csv(&mut log)?;
    print!(
        "{}",
        String::from_utf8_lossy(&log)
            .lines()
            .take(3)
            .collect::<Vec<_>>()
            .join("\n")
    );
    println!();
    Ok(())
}
