//! Online vector quantization of the query space: queries become
//! `[l, u]`-interleaved vectors, and representatives spawn wherever a
//! query lies farther than the vigilance from every existing one.

use querydrift::datamodel::{vectorize, AggregateSpec};
use querydrift::quantizer::{default_vigilance, Codebook, QuantizerConfig};
use querydrift::stats::Standardizer;
use querydrift::workloads::{gen_clustered_workload, gen_uniform_table, ClusteredWorkloadConfig, SyntheticDataConfig};

fn main() -> querydrift::Result<()> {
    let table = gen_uniform_table(&SyntheticDataConfig::new(2, 20_000, 5))?;
    let mut cfg = ClusteredWorkloadConfig::new(vec![0, 1], 8);
    cfg.n_centers = 4;
    cfg.points_per_center = 250;
    cfg.range_fraction = 0.1;
    let workload = gen_clustered_workload(&table, &cfg, &AggregateSpec::count())?;

    let raw = workload
        .queries
        .iter()
        .map(|q| vectorize(&q.predicates, table.domain()))
        .collect::<querydrift::Result<Vec<_>>>()?;
    let scaler = Standardizer::fit(&raw);
    let vectors: Vec<Vec<f64>> = raw.iter().map(|q| scaler.transform(q.as_slice())).collect();

    println!(
        "default vigilance (pairwise 0.9-quantile): {:.3}",
        default_vigilance(&vectors, 500, 0)
    );
    for vigilance in [0.002, 0.05, 1.0, 4.0, 16.0] {
        let book = Codebook::fit_online(&vectors, &QuantizerConfig::new(vigilance, 0.05))?;
        println!(
            "vigilance {vigilance}: K = {}, mean squared quantization error {:.4}",
            book.len(),
            book.quantization_error(&vectors)?
        );
    }
    Ok(())
}
