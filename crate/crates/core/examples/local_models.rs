//! One regression model per query-space cluster; a query is answered by
//! the model of its closest representative.

use querydrift::datamodel::{AggFn, AggregateSpec};
use querydrift::engine::to_pairs;
use querydrift::quantizer::{Codebook, QuantizerConfig};
use querydrift::regressors::{ensemble_predict, relative_error, train_ensemble, ModelSpec, DEFAULT_EPS_Y};
use querydrift::stats::{self, Standardizer};
use querydrift::workloads::{gen_query_workload, gen_uniform_table, QueryGenConfig, SyntheticDataConfig};

fn main() -> querydrift::Result<()> {
    let table = gen_uniform_table(&SyntheticDataConfig::new(5, 50_000, 2))?;
    let queries = gen_query_workload(
        &table,
        &QueryGenConfig::new(3_000, 2, 4),
        &AggregateSpec::new(AggFn::Count, 0),
    )?;
    let mut pairs = to_pairs(queries.iter().map(|q| (&q.predicates, q.answer)), table.domain())?;
    let scaler = Standardizer::fit(&pairs.iter().map(|p| p.query.as_slice()).collect::<Vec<_>>());
    for p in &mut pairs {
        let z = scaler.transform(p.query.as_slice());
        p.query.as_mut_slice().copy_from_slice(&z);
    }
    let (train, test) = pairs.split_at(pairs.len() * 4 / 5);

    let queries: Vec<&[f64]> = train.iter().map(|p| p.query.as_slice()).collect();
    let mut book = Codebook::fit_online(&queries, &QuantizerConfig::new(12.5, 0.05))?;
    book.refresh_stats(&queries);
    println!("K = {} clusters from {} training queries", book.len(), train.len());

    for spec in [ModelSpec::knn(), ModelSpec::ridge(), ModelSpec::sgd()] {
        let models = train_ensemble(&book, train, &spec)?;
        let mut rel = Vec::with_capacity(test.len());
        for p in test {
            rel.push(relative_error(
                ensemble_predict(&book, &models, p.query.as_slice())?,
                p.answer,
                DEFAULT_EPS_Y,
            ));
        }
        println!("{:>10}: median relative error {:.4}", spec.name(), stats::median(&rel));
    }
    Ok(())
}
