use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::table::Bounds;
use crate::error::{Error, Result};

/// Conjunctive range predicate set: column index to inclusive `[l, u]`.
/// Columns without an entry are unconstrained.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RangeQuery {
    predicates: BTreeMap<usize, Bounds>,
}

impl RangeQuery {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds (or replaces) the predicate `lower <= a_col <= upper`.
    pub fn with(mut self, col: usize, lower: f64, upper: f64) -> Result<Self> {
        self.insert(col, lower, upper)?;
        Ok(self)
    }

    pub fn insert(&mut self, col: usize, lower: f64, upper: f64) -> Result<()> {
        if !lower.is_finite() || !upper.is_finite() {
            return Err(Error::InvalidQuery(format!(
                "column {col}: non-finite bounds [{lower}, {upper}]"
            )));
        }
        if lower > upper {
            return Err(Error::InvalidQuery(format!(
                "column {col}: lower bound {lower} exceeds upper bound {upper}"
            )));
        }
        self.predicates.insert(col, (lower, upper));
        Ok(())
    }

    pub fn predicates(&self) -> &BTreeMap<usize, Bounds> {
        &self.predicates
    }

    pub fn len(&self) -> usize {
        self.predicates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicates.is_empty()
    }

    /// Checks bound ordering and that every column index is below `d`.
    pub fn validate(&self, d: usize) -> Result<()> {
        for (&col, &(l, u)) in &self.predicates {
            if col >= d {
                return Err(Error::Dimensionality(format!(
                    "predicate on column {col} but the table has {d} columns"
                )));
            }
            if !(l <= u) {
                return Err(Error::InvalidQuery(format!(
                    "column {col}: lower bound {l} exceeds upper bound {u}"
                )));
            }
        }
        Ok(())
    }

    /// Recovers the constrained intervals from a query vector: every column
    /// whose `(l, u)` differs from the domain is treated as constrained.
    pub fn from_vector(v: &QueryVector, domain: &[Bounds]) -> Result<Self> {
        if v.len() != 2 * domain.len() {
            return Err(Error::Dimensionality(format!(
                "vector of length {} for {} columns",
                v.len(),
                domain.len()
            )));
        }
        let mut q = Self::new();
        for (i, &(lo, hi)) in domain.iter().enumerate() {
            let (l, u) = (v[2 * i], v[2 * i + 1]);
            if l != lo || u != hi {
                q.insert(i, l, u)?;
            }
        }
        Ok(q)
    }
}

/// The `2d`-dimensional vector `[l_1, u_1, ..., l_d, u_d]` of a range query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueryVector(Vec<f64>);

impl QueryVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of table columns the vector targets.
    pub fn columns(&self) -> usize {
        self.0.len() / 2
    }
}

impl From<Vec<f64>> for QueryVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl std::ops::Index<usize> for QueryVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl AsRef<[f64]> for QueryVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Aggregate function applied to the selected rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AggFn {
    Count,
    Sum,
    Avg,
    Min,
    Max,
}

impl AggFn {
    pub const ALL: [AggFn; 5] = [AggFn::Count, AggFn::Sum, AggFn::Avg, AggFn::Min, AggFn::Max];
}

impl fmt::Display for AggFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AggFn::Count => "COUNT",
            AggFn::Sum => "SUM",
            AggFn::Avg => "AVG",
            AggFn::Min => "MIN",
            AggFn::Max => "MAX",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for AggFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "COUNT" => Ok(AggFn::Count),
            "SUM" => Ok(AggFn::Sum),
            "AVG" | "MEAN" => Ok(AggFn::Avg),
            "MIN" => Ok(AggFn::Min),
            "MAX" => Ok(AggFn::Max),
            other => Err(Error::Parse(format!("unknown aggregate `{other}`"))),
        }
    }
}

/// Aggregate function plus its target column (ignored for `COUNT`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AggregateSpec {
    #[serde(rename = "fn")]
    pub function: AggFn,
    #[serde(default)]
    pub target: usize,
}

impl AggregateSpec {
    pub fn count() -> Self {
        Self {
            function: AggFn::Count,
            target: 0,
        }
    }

    pub fn new(function: AggFn, target: usize) -> Self {
        Self { function, target }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.function != AggFn::Count && self.target >= d {
            return Err(Error::Dimensionality(format!(
                "{} targets column {} but the table has {d} columns",
                self.function, self.target
            )));
        }
        Ok(())
    }
}

impl fmt::Display for AggregateSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.function {
            AggFn::Count => write!(f, "COUNT(*)"),
            func => write!(f, "{func}(c{})", self.target),
        }
    }
}

/// A vectorized query with its exact answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAnswerPair {
    pub query: QueryVector,
    pub answer: f64,
}

impl QueryAnswerPair {
    pub fn new(query: QueryVector, answer: f64) -> Result<Self> {
        if !answer.is_finite() {
            return Err(Error::InvalidQuery(format!("non-finite answer {answer}")));
        }
        Ok(Self { query, answer })
    }
}

/// Maps a range query to its `2d` vector. Unconstrained columns take the
/// domain bounds so the vector describes the same row set as the query.
pub fn vectorize(query: &RangeQuery, domain: &[Bounds]) -> Result<QueryVector> {
    query.validate(domain.len())?;
    let mut v = Vec::with_capacity(2 * domain.len());
    for (i, &(lo, hi)) in domain.iter().enumerate() {
        let (l, u) = query.predicates.get(&i).copied().unwrap_or((lo, hi));
        v.push(l);
        v.push(u);
    }
    Ok(QueryVector(v))
}

/// Squared Euclidean distance between two query vectors.
pub fn query_distance(a: &QueryVector, b: &QueryVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimensionality(format!(
            "query vectors of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(squared_distance(a.as_slice(), b.as_slice()))
}

/// Unchecked squared distance over equal-length slices.
#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vectorize_fills_unconstrained_with_domain() {
        let q = RangeQuery::new().with(0, 2.0, 5.0).unwrap();
        let v = vectorize(&q, &[(0.0, 10.0), (0.0, 10.0)]).unwrap();
        assert_eq!(v.as_slice(), &[2.0, 5.0, 0.0, 10.0]);
    }

    #[test]
    fn vectorize_point_predicate() {
        let q = RangeQuery::new().with(0, 3.0, 3.0).unwrap();
        let v = vectorize(&q, &[(0.0, 10.0)]).unwrap();
        assert_eq!(v.as_slice(), &[3.0, 3.0]);
    }

    #[test]
    fn vectorize_layout() {
        let q = RangeQuery::new().with(1, 7.0, 9.0).unwrap();
        let v = vectorize(&q, &[(0.0, 1.0), (0.0, 100.0)]).unwrap();
        assert_eq!(v.as_slice(), &[0.0, 1.0, 7.0, 9.0]);
    }

    #[test]
    fn vectorize_rejects_out_of_range_column() {
        let q = RangeQuery::new().with(2, 0.0, 1.0).unwrap();
        let err = vectorize(&q, &[(0.0, 1.0), (0.0, 1.0)]).unwrap_err();
        assert!(matches!(err, Error::Dimensionality(_)));
    }

    #[test]
    fn inverted_bounds_rejected() {
        assert!(RangeQuery::new().with(0, 5.0, 1.0).is_err());
        assert!(RangeQuery::new().with(0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn distance_examples() {
        let a = QueryVector::new(vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(query_distance(&a, &a).unwrap(), 0.0);
        let a = QueryVector::new(vec![1.0, 2.0]);
        let b = QueryVector::new(vec![0.0, 0.0]);
        assert_eq!(query_distance(&a, &b).unwrap(), 5.0);
    }

    #[test]
    fn distance_length_mismatch() {
        let a = QueryVector::new(vec![1.0, 2.0]);
        let b = QueryVector::new(vec![0.0, 0.0, 1.0, 1.0]);
        assert!(matches!(query_distance(&a, &b), Err(Error::Dimensionality(_))));
    }

    #[test]
    fn aggregate_spec_json_shape() {
        let spec = AggregateSpec::new(AggFn::Avg, 3);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json, r#"{"fn":"AVG","target":3}"#);
        let back: AggregateSpec = serde_json::from_str(r#"{"fn":"COUNT"}"#).unwrap();
        assert_eq!(back, AggregateSpec::count());
    }

    #[test]
    fn aggregate_target_validated() {
        assert!(AggregateSpec::new(AggFn::Sum, 2).validate(2).is_err());
        assert!(AggregateSpec::new(AggFn::Count, 99).validate(2).is_ok());
    }
}
