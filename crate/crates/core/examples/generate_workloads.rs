//! Synthetic tables and labelled workloads: uniform ranges, spatial
//! hotspots, and a composed stream with a known drift point.

use querydrift::datamodel::{AggFn, AggregateSpec};
use querydrift::workloads::{
    compose_drift, gen_clustered_workload, gen_query_workload, gen_uniform_table, write_workload,
    ClusteredWorkloadConfig, DriftScript, QueryGenConfig, Segment, SyntheticDataConfig,
};

fn main() -> querydrift::Result<()> {
    let table = gen_uniform_table(&SyntheticDataConfig::new(4, 20_000, 7))?;
    let agg = AggregateSpec::new(AggFn::Sum, 3);

    let uniform = gen_query_workload(&table, &QueryGenConfig::new(500, 2, 11), &agg)?;
    println!("uniform workload: {} queries; first two as JSON Lines:", uniform.len());
    write_workload(std::io::stdout().lock(), &uniform[..2])?;

    let mut cfg = ClusteredWorkloadConfig::new(vec![0, 1], 3);
    cfg.n_centers = 3;
    cfg.points_per_center = 200;
    cfg.range_fraction = 0.2;
    let clustered = gen_clustered_workload(&table, &cfg, &agg)?;
    for (i, c) in clustered.centers.iter().enumerate() {
        let members = clustered.center_of.iter().filter(|&&k| k == i).count();
        println!("hotspot {i} at ({:.3}, {:.3}): {members} queries", c[0], c[1]);
    }

    let stream = compose_drift(&DriftScript::new(vec![
        Segment::new("uniform", uniform, 300),
        Segment::all("hotspots", clustered.queries),
    ]))?;
    println!(
        "stream of {} queries, drift at {:?}",
        stream.queries.len(),
        stream.drift_points
    );
    Ok(())
}
