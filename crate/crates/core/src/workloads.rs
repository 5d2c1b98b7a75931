//! Synthetic datasets, query workload generators, drift-scripted streams and
//! the JSON Lines workload format.
//!
//! Every generator is a pure function of its config and seed.

use std::io::{BufRead, Write};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{execute_exact, AggregateSpec, DataTable, RangeQuery};
use crate::error::{Error, Result};
use crate::stats;

/// Uniform synthetic table configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataConfig {
    pub columns: usize,
    pub rows: usize,
    pub value_range: (f64, f64),
    pub seed: u64,
}

impl SyntheticDataConfig {
    pub fn new(columns: usize, rows: usize, seed: u64) -> Self {
        Self {
            columns,
            rows,
            value_range: (0.0, 1e6),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns == 0 {
            return Err(Error::Config("column count must be at least 1".into()));
        }
        if self.rows == 0 {
            return Err(Error::Config("row count must be at least 1".into()));
        }
        let (lo, hi) = self.value_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("invalid value range [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// Table of i.i.d. `U[lo, hi]` cells. The domain is the configured range.
pub fn gen_uniform_table(cfg: &SyntheticDataConfig) -> Result<DataTable> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = cfg.value_range;
    let columns = (0..cfg.columns)
        .map(|_| (0..cfg.rows).map(|_| rng.random_range(lo..=hi)).collect())
        .collect();
    DataTable::from_columns(columns)?.with_domain(vec![cfg.value_range; cfg.columns])
}

/// Where query centers are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    /// Uniform over each column's domain.
    Uniform,
    /// `N(domain upper bound, center_sd)`, the literal generator algorithm.
    /// Centers sit at the domain edge, so clamped queries are narrow.
    DomainEdge,
    /// `N(column mean, column sd / 2)` estimated from the data.
    DataNormal,
}

/// Range-query workload configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryGenConfig {
    pub queries: usize,
    /// Predicates per query.
    pub predicates: usize,
    /// Mean range size as a fraction of the column's domain width.
    pub sel: f64,
    /// Standard deviation of the range size, as a fraction of domain width.
    pub range_noise_sd: f64,
    /// Center standard deviation (data units) for [`CenterMode::DomainEdge`].
    pub center_sd: f64,
    pub center_mode: CenterMode,
    /// Restricts which columns may be constrained; `None` means all.
    pub candidate_columns: Option<Vec<usize>>,
    /// Total draw budget, including rejected draws. Defaults to `100 * queries`.
    pub max_draws: Option<usize>,
    pub seed: u64,
}

impl QueryGenConfig {
    pub fn new(queries: usize, predicates: usize, seed: u64) -> Self {
        Self {
            queries,
            predicates,
            sel: 0.5,
            range_noise_sd: 0.01,
            center_sd: 100.0,
            center_mode: CenterMode::Uniform,
            candidate_columns: None,
            max_draws: None,
            seed,
        }
    }

    /// Temporal-style workload: one predicate on `column`, range of 0.2 of
    /// the column span, centers around the column mean.
    pub fn sensors(queries: usize, column: usize, seed: u64) -> Self {
        Self {
            predicates: 1,
            sel: 0.2,
            range_noise_sd: 0.0,
            center_mode: CenterMode::DataNormal,
            candidate_columns: Some(vec![column]),
            ..Self::new(queries, 1, seed)
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let pool = self.candidate_columns.as_ref().map_or(d, Vec::len);
        if self.predicates == 0 || self.predicates > pool {
            return Err(Error::Config(format!(
                "predicates per query must be in 1..={pool}, got {}",
                self.predicates
            )));
        }
        if let Some(cols) = &self.candidate_columns {
            if let Some(&c) = cols.iter().find(|&&c| c >= d) {
                return Err(Error::Config(format!("candidate column {c} out of range")));
            }
        }
        if !(self.sel > 0.0 && self.sel <= 1.0) {
            return Err(Error::Config(format!(
                "selectivity must be in (0, 1], got {}",
                self.sel
            )));
        }
        if !(self.range_noise_sd >= 0.0) || !(self.center_sd >= 0.0) {
            return Err(Error::Config("standard deviations must be non-negative".into()));
        }
        Ok(())
    }
}

/// A generated query, the aggregate it asks for and its exact answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledQuery {
    pub predicates: RangeQuery,
    pub agg: AggregateSpec,
    pub answer: f64,
}

/// Labels `query`, mapping an undefined aggregate to `None`.
fn label(table: &DataTable, query: RangeQuery, agg: &AggregateSpec) -> Result<Option<LabeledQuery>> {
    match execute_exact(table, &query, agg) {
        Ok(answer) => Ok(Some(LabeledQuery {
            predicates: query,
            agg: *agg,
            answer,
        })),
        Err(Error::EmptySelection) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Random range queries following the appendix generator: per query a range
/// size `r ~ N(sel, noise)` (redrawn while non-positive), `p` random columns,
/// centers per [`CenterMode`], bounds `z -/+ r/2` clamped to the domain.
pub fn gen_query_workload(table: &DataTable, cfg: &QueryGenConfig, agg: &AggregateSpec) -> Result<Vec<LabeledQuery>> {
    let d = table.n_cols();
    cfg.validate(d)?;
    agg.validate(d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let budget = cfg.max_draws.unwrap_or(100 * cfg.queries.max(1));
    let pool: Vec<usize> = cfg.candidate_columns.clone().unwrap_or_else(|| (0..d).collect());
    let range_dist =
        Normal::new(cfg.sel, cfg.range_noise_sd).map_err(|e| Error::Config(format!("range distribution: {e}")))?;
    let column_moments: Vec<(f64, f64)> = if cfg.center_mode == CenterMode::DataNormal {
        (0..d)
            .map(|i| (stats::mean(table.column(i)), stats::std_dev(table.column(i))))
            .collect()
    } else {
        Vec::new()
    };

    let mut out = Vec::with_capacity(cfg.queries);
    let mut draws = 0usize;
    while out.len() < cfg.queries {
        if draws >= budget {
            return Err(Error::Generation(format!(
                "only {} of {} queries labelled within {budget} draws",
                out.len(),
                cfg.queries
            )));
        }
        draws += 1;
        let r = loop {
            let r = range_dist.sample(&mut rng);
            if r > 0.0 {
                break r;
            }
        };
        let mut cols: Vec<usize> = index::sample(&mut rng, pool.len(), cfg.predicates)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        cols.sort_unstable();
        let mut query = RangeQuery::new();
        for col in cols {
            let (lo, hi) = table.domain()[col];
            let width = hi - lo;
            let z = match cfg.center_mode {
                CenterMode::Uniform => rng.random_range(lo..=hi),
                CenterMode::DomainEdge => normal(&mut rng, hi, cfg.center_sd),
                CenterMode::DataNormal => {
                    let (m, s) = column_moments[col];
                    normal(&mut rng, m, s / 2.0)
                }
            };
            let half = r * width / 2.0;
            let l = (z - half).clamp(lo, hi);
            let u = (z + half).clamp(lo, hi);
            query.insert(col, l, u)?;
        }
        if let Some(q) = label(table, query, agg)? {
            out.push(q);
        }
    }
    Ok(out)
}

fn normal(rng: &mut impl Rng, mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return mean;
    }
    let z: f64 = rng.sample(rand_distr::StandardNormal);
    mean + sd * z
}

/// The (columns, predicates) grid of the synthetic benchmark: every
/// `d` in {10, 20, 50, 100} with every `p` in {2, 5, 10} below it.
pub fn benchmark_grid() -> Vec<(usize, usize)> {
    let mut grid = Vec::new();
    for d in [10, 20, 50, 100] {
        for p in [2, 5, 10] {
            if p < d {
                grid.push((d, p));
            }
        }
    }
    grid
}

/// How cluster centers of a clustered workload are obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterSource {
    /// Drawn from a normal with the sample's per-column mean and sd.
    Sampled,
    /// Fixed centers, one coordinate per spatial column.
    Explicit(Vec<Vec<f64>>),
}

/// Hotspot-style spatial workload configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteredWorkloadConfig {
    pub spatial_columns: Vec<usize>,
    pub n_centers: usize,
    pub points_per_center: usize,
    /// Point spread around a center, as a fraction of the column sd.
    pub center_spread_fraction: f64,
    /// Maximum half-range as a fraction of the column sd.
    pub range_fraction: f64,
    /// Minimum half-range as a fraction of the column sd.
    pub min_range_fraction: f64,
    /// Rows sampled to estimate column moments.
    pub sample_size: usize,
    pub centers: CenterSource,
    pub max_draws: Option<usize>,
    pub seed: u64,
}

impl ClusteredWorkloadConfig {
    pub fn new(spatial_columns: Vec<usize>, seed: u64) -> Self {
        Self {
            spatial_columns,
            n_centers: 5,
            points_per_center: 10_000,
            center_spread_fraction: 0.01,
            range_fraction: 0.5,
            min_range_fraction: 0.0,
            sample_size: 10_000,
            centers: CenterSource::Sampled,
            max_draws: None,
            seed,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.spatial_columns.len() < 2 {
            return Err(Error::Config(
                "clustered workloads need at least 2 spatial columns".into(),
            ));
        }
        if let Some(&c) = self.spatial_columns.iter().find(|&&c| c >= d) {
            return Err(Error::Config(format!("spatial column {c} out of range")));
        }
        match &self.centers {
            CenterSource::Sampled if self.n_centers == 0 => {
                return Err(Error::Config("n_centers must be at least 1".into()))
            }
            CenterSource::Explicit(cs) => {
                if cs.is_empty() {
                    return Err(Error::Config("explicit centers list is empty".into()));
                }
                if cs.iter().any(|c| c.len() != self.spatial_columns.len()) {
                    return Err(Error::Config(
                        "explicit centers must have one coordinate per spatial column".into(),
                    ));
                }
            }
            _ => {}
        }
        if self.points_per_center == 0 || self.sample_size == 0 {
            return Err(Error::Config("point and sample counts must be positive".into()));
        }
        if !(self.center_spread_fraction >= 0.0 && self.range_fraction > 0.0) {
            return Err(Error::Config("spread and range fractions must be positive".into()));
        }
        if !(self.min_range_fraction >= 0.0 && self.min_range_fraction <= self.range_fraction) {
            return Err(Error::Config(format!(
                "min_range_fraction must be in [0, range_fraction], got {}",
                self.min_range_fraction
            )));
        }
        Ok(())
    }
}

/// Output of [`gen_clustered_workload`]: labelled queries (shuffled) and
/// the generating centers, kept for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredWorkload {
    pub queries: Vec<LabeledQuery>,
    pub centers: Vec<Vec<f64>>,
    /// Generating center index of each query.
    pub center_of: Vec<usize>,
}

/// Spatial hotspot workload: estimate moments from a row sample, place
/// centers, scatter points around each, and wrap each point in a box of
/// half-width `sd * (min + (max - min) * U(0, 1))` per spatial column, with
/// `min`/`max` the range fractions.
pub fn gen_clustered_workload(
    table: &DataTable,
    cfg: &ClusteredWorkloadConfig,
    agg: &AggregateSpec,
) -> Result<ClusteredWorkload> {
    cfg.validate(table.n_cols())?;
    agg.validate(table.n_cols())?;
    if table.n_rows() == 0 {
        return Err(Error::Config(
            "cannot build a clustered workload over an empty table".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let sample_rows = index::sample(&mut rng, table.n_rows(), cfg.sample_size.min(table.n_rows()));
    let moments: Vec<(f64, f64)> = cfg
        .spatial_columns
        .iter()
        .map(|&c| {
            let col = table.column(c);
            let xs: Vec<f64> = sample_rows.iter().map(|r| col[r]).collect();
            (stats::mean(&xs), stats::std_dev(&xs))
        })
        .collect();

    let centers: Vec<Vec<f64>> = match &cfg.centers {
        CenterSource::Explicit(cs) => cs.clone(),
        CenterSource::Sampled => (0..cfg.n_centers)
            .map(|_| moments.iter().map(|&(m, s)| normal(&mut rng, m, s)).collect())
            .collect(),
    };

    let total = centers.len() * cfg.points_per_center;
    let budget = cfg.max_draws.unwrap_or(100 * total);
    let mut draws = 0usize;
    let mut labelled: Vec<(usize, LabeledQuery)> = Vec::with_capacity(total);
    for (ci, center) in centers.iter().enumerate() {
        let mut made = 0;
        while made < cfg.points_per_center {
            if draws >= budget {
                return Err(Error::Generation(format!(
                    "only {} of {total} clustered queries labelled within {budget} draws",
                    labelled.len()
                )));
            }
            draws += 1;
            let mut query = RangeQuery::new();
            for ((&col, &(_, sd)), &cx) in cfg.spatial_columns.iter().zip(&moments).zip(center) {
                let (lo, hi) = table.domain()[col];
                let pt = normal(&mut rng, cx, sd * cfg.center_spread_fraction);
                let span = cfg.range_fraction - cfg.min_range_fraction;
                let half = sd * (cfg.min_range_fraction + span * rng.random::<f64>());
                let l = (pt - half).clamp(lo, hi);
                let u = (pt + half).clamp(lo, hi);
                query.insert(col, l, u)?;
            }
            if let Some(q) = label(table, query, agg)? {
                labelled.push((ci, q));
                made += 1;
            }
        }
    }
    labelled.shuffle(&mut rng);
    let (center_of, queries) = labelled.into_iter().unzip();
    Ok(ClusteredWorkload {
        queries,
        centers,
        center_of,
    })
}

/// One segment of a drift script: the first `count` queries of `source`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub source: Vec<LabeledQuery>,
    pub count: usize,
}

impl Segment {
    pub fn new(name: impl Into<String>, source: Vec<LabeledQuery>, count: usize) -> Self {
        Self {
            name: name.into(),
            source,
            count,
        }
    }

    /// Uses the whole source.
    pub fn all(name: impl Into<String>, source: Vec<LabeledQuery>) -> Self {
        let count = source.len();
        Self::new(name, source, count)
    }
}

/// Ordered segments; every boundary between segments is a drift point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DriftScript {
    pub segments: Vec<Segment>,
}

impl DriftScript {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }
}

/// A composed query stream with its ground-truth drift indices.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftStream {
    pub queries: Vec<LabeledQuery>,
    /// Index of the first query of every segment after the first.
    pub drift_points: Vec<usize>,
    /// Segment index of every query.
    pub segment_of: Vec<usize>,
}

pub fn compose_drift(script: &DriftScript) -> Result<DriftStream> {
    if script.segments.is_empty() {
        return Err(Error::Config("drift script has no segments".into()));
    }
    let mut queries = Vec::new();
    let mut drift_points = Vec::new();
    let mut segment_of = Vec::new();
    for (i, seg) in script.segments.iter().enumerate() {
        if seg.count == 0 {
            return Err(Error::Config(format!("segment `{}` is empty", seg.name)));
        }
        if seg.source.len() < seg.count {
            return Err(Error::Config(format!(
                "segment `{}` asks for {} queries but its source has {}",
                seg.name,
                seg.count,
                seg.source.len()
            )));
        }
        if i > 0 {
            drift_points.push(queries.len());
        }
        queries.extend_from_slice(&seg.source[..seg.count]);
        segment_of.extend(std::iter::repeat_n(i, seg.count));
    }
    Ok(DriftStream {
        queries,
        drift_points,
        segment_of,
    })
}

/// Writes one JSON object per line.
pub fn write_workload<W: Write>(mut w: W, queries: &[LabeledQuery]) -> Result<()> {
    for q in queries {
        serde_json::to_writer(&mut w, q)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSON Lines workload, validating bounds, finiteness and, when
/// `columns` is given, column indices. Blank lines are skipped.
pub fn read_workload<R: BufRead>(r: R, columns: Option<usize>) -> Result<Vec<LabeledQuery>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: LabeledQuery = serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        if !q.answer.is_finite() {
            return Err(Error::Parse(format!("line {}: non-finite answer", i + 1)));
        }
        let d = columns.unwrap_or(usize::MAX);
        q.predicates
            .validate(d)
            .and_then(|_| if columns.is_some() { q.agg.validate(d) } else { Ok(()) })
            .map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        out.push(q);
    }
    Ok(out)
}
