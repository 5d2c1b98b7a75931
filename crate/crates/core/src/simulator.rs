//! Experiments over analyst devices: the drift/adaptation run with its
//! no-adaptation ablation, multi-device federation with affiliate
//! reciprocity, and the offline-convergence and execution-rate
//! measurements.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cdm::CdmConfig;
use crate::datamodel::{execute_exact, AggFn, AggregateSpec, DataTable, RangeQuery};
use crate::engine::{to_pairs, AnalystDevice, Cycle, EngineConfig, MetricRow, Mode, Provenance, Scaling};
use crate::error::{Error, Result};
use crate::regressors::{relative_error, DEFAULT_EPS_Y};
use crate::stats;
use crate::workloads::{gen_clustered_workload, CenterSource, ClusteredWorkloadConfig, LabeledQuery};

// ---------------------------------------------------------------------------
// Drift experiment

/// Drift experiment settings. The standard scenario is a table with two
/// uniform spatial columns and a value column that jumps inside a hot
/// region; the pre-drift pattern queries three cold hotspots, the novel
/// pattern queries the hot region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftConfig {
    pub rows: usize,
    /// Baseline and in-region level of the value column, and its noise sd.
    pub base_value: f64,
    pub hot_value: f64,
    pub noise_sd: f64,
    /// Queries of the known pattern used to bootstrap the device.
    pub bootstrap_queries: usize,
    /// Known-pattern queries streamed before the drift point.
    pub pre_drift: usize,
    /// Novel-pattern queries streamed after it.
    pub post_drift: usize,
    pub engine: EngineConfig,
    pub seed: u64,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            rows: 100_000,
            base_value: 100.0,
            hot_value: 1000.0,
            noise_sd: 10.0,
            bootstrap_queries: 2000,
            pre_drift: 66,
            post_drift: 600,
            engine: EngineConfig {
                vigilance: Some(DRIFT_VIGILANCE),
                ..EngineConfig::default()
            },
            seed: 7,
        }
    }
}

impl DriftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.bootstrap_queries < 10 || self.pre_drift == 0 || self.post_drift == 0 {
            return Err(Error::Config(
                "drift run needs rows, at least 10 bootstrap queries and non-empty segments".into(),
            ));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::Config(format!("noise sd must be >= 0, got {}", self.noise_sd)));
        }
        self.engine.validate()
    }
}

/// Spawn threshold of the standard scenario (standardized units): below
/// the squared separation of the hotspots, above the spread within one.
pub const DRIFT_VIGILANCE: f64 = 1.0;
/// Hot region lower corner of the standard drift table (both columns).
pub const HOT_CORNER: f64 = 6e5;
/// Known-pattern hotspot centers of the standard scenario.
pub const KNOWN_CENTERS: [[f64; 2]; 3] = [[2e5, 2e5], [2e5, 5e5], [5e5, 2e5]];
/// Novel-pattern center of the standard scenario.
pub const NOVEL_CENTER: [f64; 2] = [8e5, 8e5];

/// Columns `x`, `y` uniform on `[0, 1e6]` and `v = base + noise`, raised to
/// `hot + noise` where both `x` and `y` exceed [`HOT_CORNER`].
pub fn drift_table(cfg: &DriftConfig) -> Result<DataTable> {
    spatial_table(cfg.rows, cfg.base_value, cfg.hot_value, cfg.noise_sd, cfg.seed)
}

fn spatial_table(rows: usize, base: f64, hot: f64, noise_sd: f64, seed: u64) -> Result<DataTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sd.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(format!("noise: {e}")))?;
    let mut x = Vec::with_capacity(rows);
    let mut y = Vec::with_capacity(rows);
    let mut v = Vec::with_capacity(rows);
    for _ in 0..rows {
        let (a, b): (f64, f64) = (rng.random_range(0.0..=1e6), rng.random_range(0.0..=1e6));
        let level = if a > HOT_CORNER && b > HOT_CORNER { hot } else { base };
        x.push(a);
        y.push(b);
        v.push(level + if noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 });
    }
    let names = vec!["x".to_string(), "y".to_string(), "v".to_string()];
    let table = DataTable::new(names, vec![x, y, v])?;
    let mut domain = table.domain().to_vec();
    domain[0] = (0.0, 1e6);
    domain[1] = (0.0, 1e6);
    table.with_domain(domain)
}

/// `AVG(v)` hotspot queries around `centers` on the spatial columns.
pub fn hotspot_queries(
    table: &DataTable,
    centers: &[[f64; 2]],
    per_center: usize,
    seed: u64,
) -> Result<Vec<LabeledQuery>> {
    hotspots(table, centers, per_center, (0.0, 0.5), seed)
}

fn hotspots(
    table: &DataTable,
    centers: &[[f64; 2]],
    per_center: usize,
    (min_range, max_range): (f64, f64),
    seed: u64,
) -> Result<Vec<LabeledQuery>> {
    let mut cfg = ClusteredWorkloadConfig::new(vec![0, 1], seed);
    cfg.range_fraction = max_range;
    cfg.min_range_fraction = min_range;
    cfg.centers = CenterSource::Explicit(centers.iter().map(|c| c.to_vec()).collect());
    cfg.points_per_center = per_center;
    Ok(gen_clustered_workload(table, &cfg, &AggregateSpec::new(AggFn::Avg, 2))?.queries)
}

/// Inputs of a drift run: table, bootstrap queries and the streamed
/// segments before and after the drift point.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftInputs {
    pub table: DataTable,
    pub bootstrap: Vec<LabeledQuery>,
    pub known: Vec<LabeledQuery>,
    pub novel: Vec<LabeledQuery>,
}

/// Builds the standard scenario of [`DriftConfig`].
pub fn drift_inputs(cfg: &DriftConfig) -> Result<DriftInputs> {
    cfg.validate()?;
    let table = drift_table(cfg)?;
    let per = (cfg.bootstrap_queries + cfg.pre_drift).div_ceil(KNOWN_CENTERS.len());
    let mut known = hotspot_queries(&table, &KNOWN_CENTERS, per, cfg.seed.wrapping_add(1))?;
    let novel = hotspot_queries(&table, &[NOVEL_CENTER], cfg.post_drift, cfg.seed.wrapping_add(2))?;
    let stream_known = known.split_off(cfg.bootstrap_queries);
    Ok(DriftInputs {
        table,
        bootstrap: known,
        known: stream_known[..cfg.pre_drift].to_vec(),
        novel,
    })
}

/// Outcome of a drift run with its ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSummary {
    /// Index (1-based query time) of the first novel query.
    pub t_drift_true: usize,
    #[serde(rename = "t_D")]
    pub t_d: Option<usize>,
    pub t_finalize: Option<usize>,
    #[serde(rename = "K_before")]
    pub k_before: usize,
    #[serde(rename = "K_after")]
    pub k_after: usize,
    pub forwarded: usize,
    /// Median relative error over the known-pattern stream.
    pub pre_drift_error: f64,
    /// Median relative error of predicted novel queries after finalize.
    pub post_finalize_error: Option<f64>,
    /// Median relative error of the no-adaptation device on novel queries.
    pub ablation_error: f64,
    pub ablation_t_d: Option<usize>,
}

/// Both devices after a drift run.
#[derive(Debug, Clone)]
pub struct DriftRun {
    pub summary: DriftSummary,
    pub adaptive: AnalystDevice,
    pub ablation: AnalystDevice,
}

/// Streams known then novel queries through an adaptive device and an
/// otherwise identical device that never adapts. The oracle is exact
/// execution on `inputs.table`.
pub fn run_drift(inputs: &DriftInputs, engine: EngineConfig) -> Result<DriftRun> {
    let table = &inputs.table;
    let domain = table.domain().to_vec();
    let pairs = to_pairs(inputs.bootstrap.iter().map(|q| (&q.predicates, q.answer)), &domain)?;
    let agg = inputs
        .bootstrap
        .first()
        .map(|q| q.agg)
        .ok_or_else(|| Error::Config("empty bootstrap workload".into()))?;
    let adaptive_cfg = EngineConfig { adapt: true, ..engine };
    let mut adaptive = AnalystDevice::bootstrap(domain.clone(), &pairs, adaptive_cfg)?;
    let mut ablation = AnalystDevice::bootstrap(domain, &pairs, EngineConfig { adapt: false, ..engine })?;
    let k_before = adaptive.codebook().len();

    let stream: Vec<&LabeledQuery> = inputs.known.iter().chain(&inputs.novel).collect();
    let oracle = |q: &RangeQuery| execute_exact(table, q, &agg);
    for (i, q) in stream.iter().enumerate() {
        for dev in [&mut adaptive, &mut ablation] {
            dev.answer(&q.predicates, oracle)?;
            dev.record_truth(i + 1, q.answer)?;
        }
    }

    let t_drift_true = inputs.known.len() + 1;
    let cycle = adaptive.cycles().first().cloned();
    let t_finalize = cycle.as_ref().map(|c| c.t_finalize);
    let rel = |rows: &[MetricRow]| -> Vec<f64> {
        rows.iter()
            .map(|r| relative_error(r.y_hat, r.y_true.unwrap_or(f64::NAN), DEFAULT_EPS_Y))
            .collect()
    };
    let pre = &adaptive.metrics()[..inputs.known.len()];
    let post_finalize: Vec<MetricRow> = match t_finalize {
        Some(tf) => adaptive.metrics()[tf..]
            .iter()
            .filter(|r| r.provenance == Provenance::Predicted)
            .copied()
            .collect(),
        None => Vec::new(),
    };
    let summary = DriftSummary {
        t_drift_true,
        t_d: adaptive.detections().iter().copied().find(|&t| t >= 1),
        t_finalize,
        k_before,
        k_after: adaptive.codebook().len(),
        forwarded: adaptive.oracle_calls(),
        pre_drift_error: stats::median(&rel(pre)),
        post_finalize_error: (!post_finalize.is_empty()).then(|| stats::median(&rel(&post_finalize))),
        ablation_error: stats::median(&rel(&ablation.metrics()[inputs.known.len()..])),
        ablation_t_d: ablation.detections().first().copied(),
    };
    Ok(DriftRun {
        summary,
        adaptive,
        ablation,
    })
}

/// Writes `t,segment,adaptive_y_hat,adaptive_provenance,ablation_y_hat,y_true,adaptive_rel_err,ablation_rel_err`.
pub fn write_drift_trace<W: Write>(run: &DriftRun, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "t",
        "segment",
        "adaptive_y_hat",
        "adaptive_provenance",
        "ablation_y_hat",
        "y_true",
        "adaptive_rel_err",
        "ablation_rel_err",
    ])?;
    for (a, b) in run.adaptive.metrics().iter().zip(run.ablation.metrics()) {
        let y = a.y_true.unwrap_or(f64::NAN);
        let segment = if a.t < run.summary.t_drift_true {
            "known"
        } else {
            "novel"
        };
        w.write_record([
            a.t.to_string(),
            segment.to_string(),
            a.y_hat.to_string(),
            a.provenance.as_str().to_string(),
            b.y_hat.to_string(),
            y.to_string(),
            relative_error(a.y_hat, y, DEFAULT_EPS_Y).to_string(),
            relative_error(b.y_hat, y, DEFAULT_EPS_Y).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Query spaces

/// A fixed set of query spaces: hotspots on a square grid over the spatial
/// columns of a flat-valued table, with a labelled query pool per space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpacesConfig {
    pub k_spaces: usize,
    pub rows: usize,
    pub value: f64,
    pub noise_sd: f64,
    /// Labelled queries generated per space.
    pub pool_per_space: usize,
    /// Head of each pool reserved for bootstrapping.
    pub bootstrap_share: usize,
    /// Tail of each pool reserved for probing.
    pub probe_share: usize,
    /// Box half-width bounds as fractions of the column sd.
    pub min_range_fraction: f64,
    pub range_fraction: f64,
    pub seed: u64,
}

impl Default for SpacesConfig {
    fn default() -> Self {
        Self {
            k_spaces: 16,
            rows: 20_000,
            value: 100.0,
            noise_sd: 10.0,
            pool_per_space: 2_400,
            bootstrap_share: 800,
            probe_share: 400,
            min_range_fraction: 0.125,
            range_fraction: 0.25,
            seed: 11,
        }
    }
}

impl SpacesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_spaces == 0 {
            return Err(Error::Config("k_spaces must be at least 1".into()));
        }
        if self.rows == 0 {
            return Err(Error::Config("rows must be positive".into()));
        }
        if self.bootstrap_share + self.probe_share >= self.pool_per_space {
            return Err(Error::Config(format!(
                "pool of {} leaves no stream queries after {} bootstrap and {} probe queries",
                self.pool_per_space, self.bootstrap_share, self.probe_share
            )));
        }
        if !(self.range_fraction > 0.0 && (0.0..=self.range_fraction).contains(&self.min_range_fraction)) {
            return Err(Error::Config(
                "range fractions must satisfy 0 <= min <= max, max > 0".into(),
            ));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::Config("noise sd must be non-negative".into()));
        }
        Ok(())
    }

    /// Space centers, row-major on a `side x side` grid of cell centers.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        let side = (self.k_spaces as f64).sqrt().ceil() as usize;
        let cell = 1e6 / side as f64;
        (0..self.k_spaces)
            .map(|s| [cell * ((s / side) as f64 + 0.5), cell * ((s % side) as f64 + 0.5)])
            .collect()
    }
}

/// Generated query spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpaces {
    pub cfg: SpacesConfig,
    pub table: DataTable,
    pub centers: Vec<[f64; 2]>,
    pub pools: Vec<Vec<LabeledQuery>>,
}

impl QuerySpaces {
    pub fn generate(cfg: &SpacesConfig) -> Result<Self> {
        cfg.validate()?;
        let table = spatial_table(cfg.rows, cfg.value, cfg.value, cfg.noise_sd, cfg.seed)?;
        let centers = cfg.centers();
        let pools = centers
            .iter()
            .enumerate()
            .map(|(s, c)| {
                let ranges = (cfg.min_range_fraction, cfg.range_fraction);
                hotspots(&table, &[*c], cfg.pool_per_space, ranges, cfg.seed + 1000 + s as u64)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            table,
            centers,
            pools,
        })
    }

    pub fn len(&self) -> usize {
        self.pools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pools.is_empty()
    }

    pub fn bootstrap_part(&self, s: usize) -> &[LabeledQuery] {
        &self.pools[s][..self.cfg.bootstrap_share]
    }

    pub fn stream_part(&self, s: usize) -> &[LabeledQuery] {
        let p = &self.pools[s];
        &p[self.cfg.bootstrap_share..p.len() - self.cfg.probe_share]
    }

    pub fn probe_part(&self, s: usize) -> &[LabeledQuery] {
        let p = &self.pools[s];
        &p[p.len() - self.cfg.probe_share..]
    }

    /// Bootstraps a device on `per_space` queries from each of `spaces`.
    pub fn bootstrap_device(&self, spaces: &[usize], per_space: usize, engine: EngineConfig) -> Result<AnalystDevice> {
        let domain = self.table.domain().to_vec();
        let mut items = Vec::new();
        for &s in spaces {
            let part = self
                .pools
                .get(s)
                .map(|_| self.bootstrap_part(s))
                .ok_or_else(|| Error::Config(format!("space {s} out of range")))?;
            if per_space > part.len() {
                return Err(Error::Config(format!(
                    "{per_space} bootstrap queries per space exceed the reserved {}",
                    part.len()
                )));
            }
            items.extend(part[..per_space].iter().map(|q| (&q.predicates, q.answer)));
        }
        AnalystDevice::bootstrap(domain, &to_pairs(items, self.table.domain())?, engine)
    }

    /// Fraction of probe windows, over all spaces, on which a fresh copy of
    /// the device's detector signals drift.
    pub fn probe_beta(&self, device: &AnalystDevice, windows: usize, window_len: usize) -> Result<f64> {
        let mut fired = 0usize;
        for s in 0..self.len() {
            let probe = self.probe_part(s);
            for w in 0..windows {
                let qs: Vec<RangeQuery> = probe[w * window_len..(w + 1) * window_len]
                    .iter()
                    .map(|q| q.predicates.clone())
                    .collect();
                fired += usize::from(device.probe(&qs)?);
            }
        }
        Ok(fired as f64 / (self.len() * windows) as f64)
    }

    fn oracle(&self) -> impl FnMut(&RangeQuery) -> Result<f64> + '_ {
        let agg = self.pools[0][0].agg;
        move |q: &RangeQuery| execute_exact(&self.table, q, &agg)
    }
}

/// Spawn threshold for query-space devices (domain-scaled units): a few
/// representatives per space, far below the squared spacing of spaces.
pub const SPACES_VIGILANCE: f64 = 0.01;
/// Detection threshold multiplier for query-space devices. Probing a known
/// space is a stationary check, held to the stationary-stream threshold.
pub const SPACES_H_SIGMAS: f64 = 5.0;

/// Device settings of the query-spaces experiments.
pub fn spaces_engine() -> EngineConfig {
    EngineConfig {
        vigilance: Some(SPACES_VIGILANCE),
        scaling: Scaling::Domain,
        cdm: CdmConfig::with_h_sigmas(SPACES_H_SIGMAS),
        ..EngineConfig::default()
    }
}

// ---------------------------------------------------------------------------
// Offline convergence

/// Sequential learning of the query spaces by one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineConfig {
    pub spaces: SpacesConfig,
    pub engine: EngineConfig,
    pub bootstrap_queries: usize,
    /// Queries streamed from a space before giving up on learning it.
    pub segment_budget: usize,
    pub probe_windows: usize,
    pub probe_len: usize,
    pub seed: u64,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            spaces: SpacesConfig::default(),
            engine: spaces_engine(),
            bootstrap_queries: 600,
            segment_budget: 1500,
            probe_windows: 4,
            probe_len: 50,
            seed: 3,
        }
    }
}

impl OfflineConfig {
    pub fn validate(&self) -> Result<()> {
        self.spaces.validate()?;
        self.engine.validate()?;
        if self.bootstrap_queries > self.spaces.bootstrap_share {
            return Err(Error::Config(
                "bootstrap_queries exceeds the reserved bootstrap share".into(),
            ));
        }
        if self.probe_windows == 0
            || self.probe_len == 0
            || self.probe_windows * self.probe_len > self.spaces.probe_share
        {
            return Err(Error::Config(
                "probe windows must be non-empty and fit in the probe share".into(),
            ));
        }
        if self.segment_budget == 0 {
            return Err(Error::Config("segment_budget must be positive".into()));
        }
        Ok(())
    }
}

/// One point of the buffering-probability curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPoint {
    /// Spaces visited so far (bootstrap space included).
    pub visited: usize,
    /// Spaces learned so far: bootstrap plus every visit that finalized.
    pub l: usize,
    pub beta_hat: f64,
    /// `1 - l / K`.
    pub beta_theory: f64,
    pub k: usize,
    /// Queries streamed in this visit until it finalized (or the budget).
    pub streamed: usize,
    pub forwarded: usize,
}

/// Bootstraps on one space, then visits the remaining spaces in a seeded
/// order, streaming each until the device adapts to it. After every visit
/// the probability of entering buffering is measured by probing all spaces.
pub fn measure_offline_convergence(cfg: &OfflineConfig) -> Result<Vec<BetaPoint>> {
    cfg.validate()?;
    let spaces = QuerySpaces::generate(&cfg.spaces)?;
    measure_offline_convergence_on(&spaces, cfg)
}

/// [`measure_offline_convergence`] over pre-generated spaces.
pub fn measure_offline_convergence_on(spaces: &QuerySpaces, cfg: &OfflineConfig) -> Result<Vec<BetaPoint>> {
    cfg.validate()?;
    let k = spaces.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng);
    let mut device = spaces.bootstrap_device(&order[..1], cfg.bootstrap_queries, cfg.engine)?;
    let mut oracle = spaces.oracle();
    let mut l = 1;
    let point = |device: &AnalystDevice, visited, l, streamed, forwarded| -> Result<BetaPoint> {
        Ok(BetaPoint {
            visited,
            l,
            beta_hat: spaces.probe_beta(device, cfg.probe_windows, cfg.probe_len)?,
            beta_theory: 1.0 - l as f64 / k as f64,
            k: device.codebook().len(),
            streamed,
            forwarded,
        })
    };
    let mut curve = vec![point(&device, 1, l, 0, 0)?];
    for (i, &s) in order.iter().enumerate().skip(1) {
        let stream = spaces.stream_part(s);
        let (cycles, calls) = (device.cycles().len(), device.oracle_calls());
        let mut streamed = 0;
        while streamed < cfg.segment_budget && device.cycles().len() == cycles {
            let q = &stream[rng.random_range(0..stream.len())];
            device.answer(&q.predicates, &mut oracle)?;
            streamed += 1;
        }
        if device.cycles().len() > cycles {
            l += 1;
        }
        curve.push(point(&device, i + 1, l, streamed, device.oracle_calls() - calls)?);
    }
    Ok(curve)
}

/// Writes `visited,l,beta_hat,beta_theory,K,streamed,forwarded`.
pub fn write_beta_curve<W: Write>(curve: &[BetaPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["visited", "l", "beta_hat", "beta_theory", "K", "streamed", "forwarded"])?;
    for p in curve {
        w.write_record([
            p.visited.to_string(),
            p.l.to_string(),
            p.beta_hat.to_string(),
            p.beta_theory.to_string(),
            p.k.to_string(),
            p.streamed.to_string(),
            p.forwarded.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Federation

/// Federation settings. Each device bootstraps on its home spaces; each
/// segment of its stream stays home or, with probability `beta`, drifts to
/// a uniformly chosen non-home space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub n: usize,
    pub beta: f64,
    pub segments: usize,
    pub segment_len: usize,
    pub home_spaces: usize,
    pub bootstrap_queries: usize,
    pub spaces: SpacesConfig,
    pub engine: EngineConfig,
    /// Shift device `i`'s segment boundaries by `i * segment_len / n`
    /// rounds, so devices do not drift in unison.
    pub stagger: bool,
    /// Step devices on worker threads between round barriers.
    pub parallel: bool,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            n: 4,
            beta: 0.3,
            segments: 20,
            segment_len: 500,
            home_spaces: 2,
            bootstrap_queries: 300,
            spaces: SpacesConfig::default(),
            engine: spaces_engine(),
            stagger: true,
            parallel: false,
            seed: 5,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        self.spaces.validate()?;
        self.engine.validate()?;
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must be in [0, 1], got {}", self.beta)));
        }
        if self.segments == 0 || self.segment_len == 0 {
            return Err(Error::Config("segments and segment_len must be positive".into()));
        }
        if self.home_spaces == 0 || self.home_spaces >= self.spaces.k_spaces {
            return Err(Error::Config("home_spaces must be in [1, k_spaces)".into()));
        }
        if self.bootstrap_queries > self.spaces.bootstrap_share {
            return Err(Error::Config(
                "bootstrap_queries exceeds the reserved bootstrap share".into(),
            ));
        }
        Ok(())
    }
}

/// Workload of one device: home spaces and the space of every segment.
/// Segment boundaries are shifted `offset` rounds earlier; the rounds cut
/// from the front of the first segment are appended at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceScript {
    pub home: Vec<usize>,
    pub segments: Vec<usize>,
    pub segment_len: usize,
    #[serde(default)]
    pub offset: usize,
}

impl DeviceScript {
    pub fn len(&self) -> usize {
        self.segments.len() * self.segment_len
    }

    /// Segment index of round `r` (0-based).
    pub fn segment_of(&self, r: usize) -> usize {
        (r + self.offset) / self.segment_len % self.segments.len()
    }

    /// Rounds since the current segment started, 1-based at its first round.
    pub fn position_in_segment(&self, r: usize) -> usize {
        (r + self.offset) % self.segment_len + 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Device `i` is at home on spaces `home_spaces * i ..` (mod K).
pub fn federation_scripts(cfg: &FederationConfig) -> Result<Vec<DeviceScript>> {
    cfg.validate()?;
    let k = cfg.spaces.k_spaces;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.n)
        .map(|i| {
            let home: Vec<usize> = (0..cfg.home_spaces).map(|h| (cfg.home_spaces * i + h) % k).collect();
            let away: Vec<usize> = (0..k).filter(|s| !home.contains(s)).collect();
            let segments = (0..cfg.segments)
                .map(|_| {
                    if rng.random::<f64>() < cfg.beta {
                        away[rng.random_range(0..away.len())]
                    } else {
                        home[rng.random_range(0..home.len())]
                    }
                })
                .collect();
            DeviceScript {
                home,
                segments,
                segment_len: cfg.segment_len,
                offset: if cfg.stagger { i * cfg.segment_len / cfg.n } else { 0 },
            }
        })
        .collect())
}

/// One row per round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    /// Devices that answered this round's query in buffering mode.
    pub buffering: usize,
    pub executions: usize,
    pub offers: usize,
    pub accepted: usize,
    pub total_k: usize,
}

/// Per-device outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSummary {
    pub device: usize,
    pub k_initial: usize,
    pub final_k: usize,
    pub cycles: Vec<Cycle>,
    /// `K_{m+1} / K_m` of every completed cycle.
    pub k_ratios: Vec<f64>,
    /// Position of each detection within its segment (1-based).
    pub detection_delays: Vec<usize>,
    pub oracle_calls: usize,
    pub buffering_queries: usize,
    pub affiliates_accepted: usize,
}

/// Run-level measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationSummary {
    pub n: usize,
    pub lambda: f64,
    pub rounds: usize,
    pub queries: usize,
    pub executions: usize,
    /// Fraction of answered queries that found their device buffering.
    pub beta_hat: f64,
    /// Oracle calls per answered query.
    pub execution_rate: f64,
    /// `(1/lambda^2)(2 - (1 - beta_hat)^(n-1))`.
    pub bound: f64,
    pub affiliate_offers: usize,
    pub affiliates_accepted: usize,
    /// Every accepted affiliate pair was executed exactly once, for
    /// another device, and accepted at most once per receiver.
    pub reciprocity_ok: bool,
    pub devices: Vec<DeviceSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationStats {
    pub summary: FederationSummary,
    pub rounds: Vec<RoundStats>,
}

#[derive(Debug, Clone)]
pub struct FederationRun {
    pub stats: FederationStats,
    pub devices: Vec<AnalystDevice>,
}

/// Upper bound on the execution rate at the central system.
pub fn execution_bound(lambda: f64, beta: f64, n: usize) -> f64 {
    (2.0 - (1.0 - beta).powi(n.saturating_sub(1) as i32)) / (lambda * lambda)
}

/// Oracle calls per answered query over the rounds in `window`.
pub fn measure_execution_rate(stats: &FederationStats, window: std::ops::Range<usize>) -> f64 {
    let rows = &stats.rounds[window.start.min(stats.rounds.len())..window.end.min(stats.rounds.len())];
    if rows.is_empty() {
        return 0.0;
    }
    let calls: usize = rows.iter().map(|r| r.executions).sum();
    calls as f64 / (rows.len() * stats.summary.n) as f64
}

/// Builds the standard federation: spaces, scripts, bootstrapped devices.
pub fn run_standard_federation(cfg: &FederationConfig) -> Result<FederationRun> {
    let spaces = QuerySpaces::generate(&cfg.spaces)?;
    let scripts = federation_scripts(cfg)?;
    run_federation(&spaces, &scripts, cfg)
}

/// One executed query at the central system.
struct Execution {
    source: usize,
    query: RangeQuery,
    answer: f64,
}

/// Steps all devices in lockstep rounds (one query each per round). At the
/// round barrier, every pair executed this round is offered, in source
/// order, to every other device that is buffering. Results do not depend
/// on `cfg.parallel`.
pub fn run_federation(spaces: &QuerySpaces, scripts: &[DeviceScript], cfg: &FederationConfig) -> Result<FederationRun> {
    cfg.validate()?;
    if scripts.len() != cfg.n {
        return Err(Error::Config(format!(
            "{} scripts for {} devices",
            scripts.len(),
            cfg.n
        )));
    }
    let rounds = scripts.iter().map(DeviceScript::len).max().unwrap_or(0);
    if scripts.iter().any(|s| s.len() != rounds) {
        return Err(Error::Config("device scripts must have equal lengths".into()));
    }
    if let Some(s) = scripts
        .iter()
        .flat_map(|s| s.home.iter().chain(&s.segments))
        .find(|&&s| s >= spaces.len())
    {
        return Err(Error::Config(format!("script refers to space {s} of {}", spaces.len())));
    }

    let mut devices = scripts
        .iter()
        .map(|s| spaces.bootstrap_device(&s.home, cfg.bootstrap_queries, cfg.engine))
        .collect::<Result<Vec<_>>>()?;
    let k_initial: Vec<usize> = devices.iter().map(|d| d.codebook().len()).collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..cfg.n)
        .map(|i| ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i as u64 + 1))))
        .collect();

    let mut executions: Vec<Execution> = Vec::new();
    let mut accepted_by: Vec<Vec<usize>> = vec![Vec::new(); cfg.n];
    let mut round_rows = Vec::with_capacity(rounds);
    for r in 0..rounds {
        let picks: Vec<&LabeledQuery> = scripts
            .iter()
            .zip(rngs.iter_mut())
            .map(|(s, rng)| {
                let stream = spaces.stream_part(s.segments[s.segment_of(r)]);
                &stream[rng.random_range(0..stream.len())]
            })
            .collect();
        let outcomes = step_round(spaces, &mut devices, &picks, r + 1, cfg.parallel)?;

        let buffering = outcomes.iter().filter(|o| o.buffering).count();
        let first_new = executions.len();
        for (i, o) in outcomes.iter().enumerate() {
            if o.executed {
                executions.push(Execution {
                    source: i,
                    query: picks[i].predicates.clone(),
                    answer: o.value,
                });
            }
        }
        let (mut offers, mut accepted) = (0, 0);
        for (id, e) in executions.iter().enumerate().skip(first_new) {
            for (i, dev) in devices.iter_mut().enumerate() {
                if i == e.source || dev.session().is_none() {
                    continue;
                }
                offers += 1;
                if dev.offer_affiliate(e.source, &e.query, e.answer)? {
                    accepted += 1;
                    accepted_by[i].push(id);
                }
            }
        }
        round_rows.push(RoundStats {
            round: r + 1,
            buffering,
            executions: executions.len() - first_new,
            offers,
            accepted,
            total_k: devices.iter().map(|d| d.codebook().len()).sum(),
        });
    }

    let total_calls: usize = devices.iter().map(AnalystDevice::oracle_calls).sum();
    let reciprocity_ok = total_calls == executions.len()
        && accepted_by.iter().enumerate().all(|(i, ids)| {
            let mut sorted = ids.clone();
            sorted.sort_unstable();
            sorted.dedup();
            sorted.len() == ids.len()
                && ids
                    .iter()
                    .all(|&id| id < executions.len() && executions[id].source != i)
        });
    let queries = rounds * cfg.n;
    let buffering_total: usize = round_rows.iter().map(|r| r.buffering).sum();
    let beta_hat = if queries == 0 {
        0.0
    } else {
        buffering_total as f64 / queries as f64
    };
    let summaries = devices
        .iter()
        .enumerate()
        .map(|(i, d)| device_summary(i, d, k_initial[i], &scripts[i], accepted_by[i].len()))
        .collect();
    let summary = FederationSummary {
        n: cfg.n,
        lambda: cfg.engine.adm.lambda,
        rounds,
        queries,
        executions: executions.len(),
        beta_hat,
        execution_rate: if queries == 0 {
            0.0
        } else {
            executions.len() as f64 / queries as f64
        },
        bound: execution_bound(cfg.engine.adm.lambda, beta_hat, cfg.n),
        affiliate_offers: round_rows.iter().map(|r| r.offers).sum(),
        affiliates_accepted: accepted_by.iter().map(Vec::len).sum(),
        reciprocity_ok,
        devices: summaries,
    };
    Ok(FederationRun {
        stats: FederationStats {
            summary,
            rounds: round_rows,
        },
        devices,
    })
}

struct Outcome {
    value: f64,
    executed: bool,
    buffering: bool,
}

fn step_device(spaces: &QuerySpaces, dev: &mut AnalystDevice, q: &LabeledQuery, t: usize) -> Result<Outcome> {
    let a = dev.answer(&q.predicates, spaces.oracle())?;
    dev.record_truth(t, q.answer)?;
    Ok(Outcome {
        value: a.value,
        executed: a.provenance == Provenance::Executed,
        buffering: dev.metrics()[t - 1].mode == Mode::Buffering,
    })
}

fn step_round(
    spaces: &QuerySpaces,
    devices: &mut [AnalystDevice],
    picks: &[&LabeledQuery],
    t: usize,
    parallel: bool,
) -> Result<Vec<Outcome>> {
    if !parallel || devices.len() < 2 {
        return devices
            .iter_mut()
            .zip(picks)
            .map(|(d, q)| step_device(spaces, d, q, t))
            .collect();
    }
    let workers = std::thread::available_parallelism()
        .map_or(2, |n| n.get())
        .clamp(2, devices.len());
    let chunk = devices.len().div_ceil(workers);
    let parts: Vec<Result<Vec<Outcome>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = devices
            .chunks_mut(chunk)
            .zip(picks.chunks(chunk))
            .map(|(ds, qs)| {
                scope.spawn(move || {
                    ds.iter_mut()
                        .zip(qs)
                        .map(|(d, q)| step_device(spaces, d, q, t))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("device worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(devices.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn device_summary(
    i: usize,
    d: &AnalystDevice,
    k_initial: usize,
    script: &DeviceScript,
    accepted: usize,
) -> DeviceSummary {
    let cycles = d.cycles().to_vec();
    DeviceSummary {
        device: i,
        k_initial,
        final_k: d.codebook().len(),
        k_ratios: cycles.iter().map(|c| c.k_after as f64 / c.k_before as f64).collect(),
        detection_delays: d
            .detections()
            .iter()
            .map(|&t| script.position_in_segment(t - 1))
            .collect(),
        cycles,
        oracle_calls: d.oracle_calls(),
        buffering_queries: d.metrics().iter().filter(|m| m.mode == Mode::Buffering).count(),
        affiliates_accepted: accepted,
    }
}

/// Writes `round,buffering,executions,offers,accepted,total_K`, prefixed by
/// `n` so runs of several sizes can share a file.
pub fn write_rounds_csv<W: Write>(runs: &[&FederationStats], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "round", "buffering", "executions", "offers", "accepted", "total_K"])?;
    for s in runs {
        for r in &s.rounds {
            w.write_record([
                s.summary.n.to_string(),
                r.round.to_string(),
                r.buffering.to_string(),
                r.executions.to_string(),
                r.offers.to_string(),
                r.accepted.to_string(),
                r.total_k.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::sync::OnceLock;

    use super::*;

    fn small_config() -> SpacesConfig {
        SpacesConfig {
            k_spaces: 4,
            pool_per_space: 900,
            bootstrap_share: 300,
            probe_share: 100,
            ..SpacesConfig::default()
        }
    }

    fn small_spaces() -> &'static QuerySpaces {
        static SPACES: OnceLock<QuerySpaces> = OnceLock::new();
        SPACES.get_or_init(|| QuerySpaces::generate(&small_config()).unwrap())
    }

    fn federation(n: usize) -> FederationConfig {
        FederationConfig {
            n,
            segments: 3,
            segment_len: 300,
            spaces: small_config(),
            ..FederationConfig::default()
        }
    }

    fn script(home: [usize; 2], away: usize) -> DeviceScript {
        DeviceScript {
            home: home.to_vec(),
            segments: vec![home[0], away, away],
            segment_len: 300,
            offset: 0,
        }
    }

    /// Two pairs of devices drifting into each other's home spaces at the
    /// same time, so each device's executions land in spaces the other
    /// pair already knows.
    fn overlap_scripts() -> Vec<DeviceScript> {
        vec![
            script([0, 1], 2),
            script([0, 1], 2),
            script([2, 3], 0),
            script([2, 3], 0),
        ]
    }

    #[test]
    fn execution_bound_values() {
        assert!((execution_bound(3.0, 0.3, 4) - (2.0 - 0.7f64.powi(3)) / 9.0).abs() < 1e-15);
        assert!((execution_bound(3.0, 0.3, 4) - 0.184_111_111_111_111_1).abs() < 1e-12);
        // a lone device: the second term is (1 - beta)^0 = 1
        assert_eq!(execution_bound(3.0, 0.9, 1), 1.0 / 9.0);
        assert_eq!(execution_bound(2.0, 1.0, 8), 0.5);
    }

    #[test]
    fn spaces_partition_pools() {
        let s = small_spaces();
        assert_eq!(s.len(), 4);
        assert_eq!(
            s.centers,
            vec![[2.5e5, 2.5e5], [2.5e5, 7.5e5], [7.5e5, 2.5e5], [7.5e5, 7.5e5]]
        );
        for k in 0..s.len() {
            let sizes = (s.bootstrap_part(k).len(), s.stream_part(k).len(), s.probe_part(k).len());
            assert_eq!(sizes, (300, 500, 100));
        }
        let mut bad = small_config();
        bad.bootstrap_share = 850;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn scripts_follow_home_assignment() {
        let cfg = FederationConfig {
            beta: 0.0,
            ..federation(3)
        };
        let scripts = federation_scripts(&cfg).unwrap();
        assert_eq!(scripts[1].home, vec![2, 3]);
        assert_eq!(scripts[2].home, vec![0, 1]);
        assert!(scripts.iter().all(|s| s.segments.iter().all(|x| s.home.contains(x))));
        let always = federation_scripts(&FederationConfig { beta: 1.0, ..cfg }).unwrap();
        assert!(always.iter().all(|s| s.segments.iter().all(|x| !s.home.contains(x))));
        assert_eq!(
            federation_scripts(&federation(3)).unwrap(),
            federation_scripts(&federation(3)).unwrap()
        );
    }

    #[test]
    fn mismatched_scripts_are_rejected() {
        let spaces = small_spaces();
        let scripts = overlap_scripts();
        assert!(matches!(
            run_federation(spaces, &scripts[..3], &federation(4)),
            Err(Error::Config(_))
        ));
        let mut uneven = scripts.clone();
        uneven[0].segments.pop();
        assert!(matches!(
            run_federation(spaces, &uneven, &federation(4)),
            Err(Error::Config(_))
        ));
        let mut outside = scripts;
        outside[1].segments[0] = 9;
        assert!(matches!(
            run_federation(spaces, &outside, &federation(4)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn lone_device_has_no_affiliates() {
        let run = run_federation(small_spaces(), &overlap_scripts()[..1], &federation(1)).unwrap();
        let s = &run.stats.summary;
        assert_eq!((s.affiliate_offers, s.affiliates_accepted), (0, 0));
        assert!(s.reciprocity_ok);
        assert!(s.executions > 0);
        assert_eq!(s.executions, run.devices[0].oracle_calls());
    }

    #[test]
    fn overlapping_sessions_add_several_representatives() {
        let cfg = federation(4);
        let run = run_federation(small_spaces(), &overlap_scripts(), &cfg).unwrap();
        let s = &run.stats.summary;
        assert!(s.reciprocity_ok);
        for d in &s.devices {
            assert!(!d.cycles.is_empty(), "device {} never adapted", d.device);
            for c in &d.cycles {
                assert!(c.affiliates >= cfg.engine.adm.min_buffer);
                assert!(c.k_after - c.k_before > 1, "device {}: {c:?}", d.device);
            }
        }
        let total: usize = s.devices.iter().map(|d| d.affiliates_accepted).sum();
        assert_eq!(total, s.affiliates_accepted);
        assert_eq!(s.executions, s.devices.iter().map(|d| d.oracle_calls).sum::<usize>());
    }

    #[test]
    fn parallel_rounds_match_serial() {
        let spaces = small_spaces();
        let serial = run_federation(spaces, &overlap_scripts(), &federation(4)).unwrap();
        let cfg = FederationConfig {
            parallel: true,
            ..federation(4)
        };
        let parallel = run_federation(spaces, &overlap_scripts(), &cfg).unwrap();
        assert_eq!(serial.stats, parallel.stats);
        for (a, b) in serial.devices.iter().zip(&parallel.devices) {
            assert_eq!(a.metrics(), b.metrics());
        }
    }

    #[test]
    fn rate_over_prediction_rounds_is_zero() {
        let run = run_federation(small_spaces(), &overlap_scripts(), &federation(4)).unwrap();
        let stats = &run.stats;
        let quiet: Vec<usize> = (0..stats.rounds.len())
            .filter(|&r| stats.rounds[r].buffering == 0)
            .collect();
        assert!(!quiet.is_empty());
        for r in quiet {
            assert_eq!(measure_execution_rate(stats, r..r + 1), 0.0);
        }
        let all = measure_execution_rate(stats, 0..stats.rounds.len());
        assert!((all - stats.summary.execution_rate).abs() < 1e-15);
        assert_eq!(measure_execution_rate(stats, 5..5), 0.0);
    }

    #[test]
    fn offline_curve_steps_down_to_zero() {
        let cfg = OfflineConfig {
            spaces: small_config(),
            bootstrap_queries: 300,
            probe_windows: 2,
            ..OfflineConfig::default()
        };
        let curve = measure_offline_convergence_on(small_spaces(), &cfg).unwrap();
        assert_eq!(curve.len(), 4);
        assert!(curve
            .windows(2)
            .all(|w| w[1].beta_hat <= w[0].beta_hat && w[1].l == w[0].l + 1));
        let last = curve.last().unwrap();
        assert_eq!((last.l, last.beta_hat, last.beta_theory), (4, 0.0, 0.0));
        let mut buf = Vec::new();
        write_beta_curve(&curve, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next(),
            Some("visited,l,beta_hat,beta_theory,K,streamed,forwarded")
        );
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn rounds_csv_shape() {
        let run = run_federation(small_spaces(), &overlap_scripts()[..1], &federation(1)).unwrap();
        let mut buf = Vec::new();
        write_rounds_csv(&[&run.stats], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next(),
            Some("n,round,buffering,executions,offers,accepted,total_K")
        );
        assert_eq!(text.lines().count(), 1 + 900);
    }

    #[test]
    fn drift_summary_schema() {
        let summary = DriftSummary {
            t_drift_true: 67,
            t_d: Some(68),
            t_finalize: None,
            k_before: 3,
            k_after: 3,
            forwarded: 0,
            pre_drift_error: 0.0,
            post_finalize_error: None,
            ablation_error: 1.0,
            ablation_t_d: None,
        };
        let v = serde_json::to_value(summary).unwrap();
        for key in ["t_drift_true", "t_D", "K_before", "K_after"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
