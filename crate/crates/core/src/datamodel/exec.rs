//! Exact aggregate execution by full columnar scan.

use super::query::{AggFn, AggregateSpec, RangeQuery};
use super::table::DataTable;
use crate::error::{Error, Result};

/// Row ids satisfying every predicate of `query`, in ascending order.
pub fn select_rows(table: &DataTable, query: &RangeQuery) -> Result<Vec<u32>> {
    let mask = selection_mask(table, query)?;
    // branch-free compaction: write every id, advance only on a match
    let mut ids = vec![0u32; mask.len()];
    let mut len = 0;
    for (r, &keep) in mask.iter().enumerate() {
        ids[len] = r as u32;
        len += usize::from(keep);
    }
    ids.truncate(len);
    Ok(ids)
}

/// Per-row predicate outcome. Each predicate is one branch-free pass over
/// its column, which the compiler vectorizes.
fn selection_mask(table: &DataTable, query: &RangeQuery) -> Result<Vec<bool>> {
    query.validate(table.n_cols())?;
    let mut mask = vec![true; table.n_rows()];
    for (&col, &(l, u)) in query.predicates() {
        for (keep, &v) in mask.iter_mut().zip(table.column(col)) {
            *keep &= (l <= v) & (v <= u);
        }
    }
    Ok(mask)
}

/// Evaluates `agg` over the rows matching `query`.
///
/// Empty selections yield 0 for `COUNT` and `SUM`; `AVG`, `MIN` and `MAX`
/// return [`Error::EmptySelection`].
pub fn execute_exact(table: &DataTable, query: &RangeQuery, agg: &AggregateSpec) -> Result<f64> {
    agg.validate(table.n_cols())?;
    let mask = selection_mask(table, query)?;
    let count = mask.iter().filter(|&&k| k).count();
    if agg.function == AggFn::Count {
        return Ok(count as f64);
    }
    if count == 0 && agg.function != AggFn::Sum {
        return Err(Error::EmptySelection);
    }
    // unselected rows contribute the operation's identity, without branching
    let values = mask.iter().zip(table.column(agg.target));
    Ok(match agg.function {
        AggFn::Count => unreachable!(),
        AggFn::Sum => values.map(|(&k, &v)| if k { v } else { 0.0 }).sum(),
        AggFn::Avg => values.map(|(&k, &v)| if k { v } else { 0.0 }).sum::<f64>() / count as f64,
        AggFn::Min => values.fold(f64::INFINITY, |m, (&k, &v)| m.min(if k { v } else { f64::INFINITY })),
        AggFn::Max => values.fold(f64::NEG_INFINITY, |m, (&k, &v)| {
            m.max(if k { v } else { f64::NEG_INFINITY })
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> DataTable {
        DataTable::from_columns(vec![vec![1.0, 2.0, 3.0], vec![10.0, 20.0, 30.0]]).unwrap()
    }

    #[test]
    fn count_sum_avg_examples() {
        let t = table();
        let q = RangeQuery::new().with(0, 1.5, 3.5).unwrap();
        assert_eq!(execute_exact(&t, &q, &AggregateSpec::count()).unwrap(), 2.0);
        assert_eq!(execute_exact(&t, &q, &AggregateSpec::new(AggFn::Sum, 0)).unwrap(), 5.0);
        assert_eq!(execute_exact(&t, &q, &AggregateSpec::new(AggFn::Avg, 0)).unwrap(), 2.5);
        assert_eq!(execute_exact(&t, &q, &AggregateSpec::new(AggFn::Min, 1)).unwrap(), 20.0);
        assert_eq!(execute_exact(&t, &q, &AggregateSpec::new(AggFn::Max, 1)).unwrap(), 30.0);
    }

    #[test]
    fn bounds_are_inclusive() {
        let t = table();
        let q = RangeQuery::new().with(0, 2.0, 3.0).unwrap();
        assert_eq!(execute_exact(&t, &q, &AggregateSpec::count()).unwrap(), 2.0);
    }

    #[test]
    fn empty_selection_semantics() {
        let t = table();
        let q = RangeQuery::new().with(0, 100.0, 200.0).unwrap();
        assert_eq!(execute_exact(&t, &q, &AggregateSpec::count()).unwrap(), 0.0);
        assert_eq!(execute_exact(&t, &q, &AggregateSpec::new(AggFn::Sum, 1)).unwrap(), 0.0);
        for f in [AggFn::Avg, AggFn::Min, AggFn::Max] {
            assert!(matches!(
                execute_exact(&t, &q, &AggregateSpec::new(f, 1)),
                Err(Error::EmptySelection)
            ));
        }
    }

    #[test]
    fn no_predicates_selects_everything() {
        let t = table();
        assert_eq!(
            execute_exact(&t, &RangeQuery::new(), &AggregateSpec::new(AggFn::Sum, 1)).unwrap(),
            60.0
        );
    }

    #[test]
    fn conjunction_of_predicates() {
        let t = table();
        let q = RangeQuery::new()
            .with(0, 1.0, 2.0)
            .unwrap()
            .with(1, 15.0, 35.0)
            .unwrap();
        assert_eq!(execute_exact(&t, &q, &AggregateSpec::count()).unwrap(), 1.0);
    }

    #[test]
    fn invalid_target_rejected() {
        let t = table();
        let err = execute_exact(&t, &RangeQuery::new(), &AggregateSpec::new(AggFn::Sum, 5));
        assert!(matches!(err, Err(Error::Dimensionality(_))));
    }
}
