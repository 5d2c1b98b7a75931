//! Exact aggregates over a columnar table: the ground truth every
//! prediction is measured against.

use querydrift::datamodel::{execute_exact, select_rows, AggFn, AggregateSpec, RangeQuery};
use querydrift::workloads::{gen_uniform_table, SyntheticDataConfig};

fn main() -> querydrift::Result<()> {
    let table = gen_uniform_table(&SyntheticDataConfig::new(3, 50_000, 1))?;
    let query = RangeQuery::new().with(0, 2e5, 5e5)?.with(1, 1e5, 9e5)?;
    println!("rows selected: {}", select_rows(&table, &query)?.len());
    for f in [AggFn::Count, AggFn::Sum, AggFn::Avg, AggFn::Min, AggFn::Max] {
        let y = execute_exact(&table, &query, &AggregateSpec::new(f, 2))?;
        println!("{f:>5}(col 2) = {y:.3}");
    }

    // COUNT and SUM are defined on an empty selection, the others are not
    let empty = RangeQuery::new().with(0, 2e6, 3e6)?;
    println!(
        "COUNT over empty = {}",
        execute_exact(&table, &empty, &AggregateSpec::count())?
    );
    match execute_exact(&table, &empty, &AggregateSpec::new(AggFn::Avg, 2)) {
        Err(e) => println!("AVG over empty: {e}"),
        Ok(y) => println!("AVG over empty = {y}"),
    }
    Ok(())
}
