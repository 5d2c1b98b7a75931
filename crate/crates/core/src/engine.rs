//! The analyst device: answers range queries by prediction, watches the
//! error proxy for drift, and switches to buffering mode to adapt.
//!
//! All codebook, detector and adaptation work happens in one standardized
//! query space fitted on the bootstrap training split; models receive the
//! same standardized vectors.

use std::collections::VecDeque;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adm::{AdaptationSession, AdmConfig, Decision};
use crate::cdm::{CdmConfig, CusumDetector};
use crate::datamodel::{vectorize, Bounds, QueryAnswerPair, QueryVector, RangeQuery};
use crate::error::{Error, Result};
use crate::quantizer::{default_vigilance, Codebook, QuantizerConfig};
use crate::regressors::{self, ModelSpec, TrainedModel};
use crate::stats::Standardizer;

/// Pairwise sample size for the default vigilance.
const VIGILANCE_SAMPLE: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Prediction,
    Buffering,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Prediction => "PREDICTION",
            Mode::Buffering => "BUFFERING",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    Predicted,
    Executed,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Predicted => "PREDICTED",
            Provenance::Executed => "EXECUTED",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Answer {
    pub value: f64,
    pub provenance: Provenance,
}

/// How the standardized query space is fixed at bootstrap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Per-dimension mean and sd of the training queries.
    #[default]
    Training,
    /// Domain midpoint and uniform-over-domain sd; isotropic and
    /// independent of where the training queries happen to lie.
    Domain,
}

/// Everything needed to bootstrap and run a device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Quantizer spawn threshold in standardized units; `None` picks the
    /// 0.9-quantile of pairwise squared distances of the training queries.
    pub vigilance: Option<f64>,
    pub learn_rate: f64,
    pub scaling: Scaling,
    pub model: ModelSpec,
    pub cdm: CdmConfig,
    pub adm: AdmConfig,
    /// Fraction of bootstrap pairs held out for per-cluster EPE.
    pub holdout: f64,
    /// When false the device detects drift but never adapts.
    pub adapt: bool,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            vigilance: None,
            learn_rate: 0.05,
            scaling: Scaling::Training,
            model: ModelSpec::ridge(),
            cdm: CdmConfig::default(),
            adm: AdmConfig::default(),
            holdout: 0.2,
            adapt: true,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.vigilance {
            QuantizerConfig::new(v, self.learn_rate).validate()?;
        }
        self.model.validate()?;
        self.cdm.validate()?;
        self.adm.validate()?;
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(Error::Config(format!(
                "holdout must be in (0, 1), got {}",
                self.holdout
            )));
        }
        Ok(())
    }
}

/// One row of the per-query log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub t: usize,
    pub mode: Mode,
    pub provenance: Provenance,
    pub y_hat: f64,
    pub y_true: Option<f64>,
    /// Detector inputs; absent while buffering (the detector is paused).
    pub u_tilde: Option<f64>,
    pub g: Option<f64>,
    pub k: usize,
}

/// One completed buffering cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cycle {
    pub t_detect: usize,
    pub t_finalize: usize,
    pub k_before: usize,
    pub k_after: usize,
    pub forwarded: usize,
    pub affiliates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Snapshot {
    domain: Vec<Bounds>,
    scaler: Standardizer,
    codebook: Codebook,
    models: Vec<TrainedModel>,
    detector: CusumDetector,
    calibration: Vec<QueryVector>,
    cfg: EngineConfig,
}

#[derive(Serialize, Deserialize)]
struct DeviceDocument {
    format: String,
    version: u32,
    device: Snapshot,
}

const DEVICE_FORMAT: &str = "querydrift.device";
const DEVICE_VERSION: u32 = 1;

/// Analyst device: codebook, local models, detector and adaptation state.
#[derive(Debug, Clone)]
pub struct AnalystDevice {
    state: Snapshot,
    session: Option<AdaptationSession>,
    session_opened: usize,
    metrics: Vec<MetricRow>,
    retry: VecDeque<RangeQuery>,
    cycles: Vec<Cycle>,
    abandoned: Vec<usize>,
    detections: Vec<usize>,
    in_alarm: bool,
    oracle_calls: usize,
}

/// Vectorizes labeled range queries against `domain`.
pub fn to_pairs<'a, I>(items: I, domain: &[Bounds]) -> Result<Vec<QueryAnswerPair>>
where
    I: IntoIterator<Item = (&'a RangeQuery, f64)>,
{
    items
        .into_iter()
        .map(|(q, y)| QueryAnswerPair::new(vectorize(q, domain)?, y))
        .collect()
}

impl AnalystDevice {
    /// Learns the query space from raw (unstandardized) pairs: seeded
    /// train/holdout split, standardization, online clustering, one model
    /// per cluster, per-cluster EPE on the holdout, and detector
    /// calibration over all pairs.
    pub fn bootstrap(domain: Vec<Bounds>, pairs: &[QueryAnswerPair], cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        if pairs.len() < 5 {
            return Err(Error::Config(format!(
                "bootstrap needs at least 5 pairs, got {}",
                pairs.len()
            )));
        }
        let dim = 2 * domain.len();
        if let Some(p) = pairs.iter().find(|p| p.query.len() != dim) {
            return Err(Error::Dimensionality(format!(
                "bootstrap query of length {} for a {}-column domain",
                p.query.len(),
                domain.len()
            )));
        }
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
        let n_test = ((pairs.len() as f64 * cfg.holdout).round() as usize).clamp(1, pairs.len() - 1);
        let (test_idx, train_idx) = order.split_at(n_test);

        let scaler = match cfg.scaling {
            Scaling::Training => {
                let raw_train: Vec<&[f64]> = train_idx.iter().map(|&i| pairs[i].query.as_slice()).collect();
                Standardizer::fit(&raw_train)
            }
            Scaling::Domain => Standardizer::from_bounds(&domain),
        };
        let std_pair = |i: usize| QueryAnswerPair {
            query: QueryVector::new(scaler.transform(pairs[i].query.as_slice())),
            answer: pairs[i].answer,
        };
        let train: Vec<QueryAnswerPair> = train_idx.iter().map(|&i| std_pair(i)).collect();
        let test: Vec<QueryAnswerPair> = test_idx.iter().map(|&i| std_pair(i)).collect();

        let vigilance = match cfg.vigilance {
            Some(v) => v,
            None => {
                let qs: Vec<&[f64]> = train.iter().map(|p| p.query.as_slice()).collect();
                default_vigilance(&qs, VIGILANCE_SAMPLE, cfg.seed)
            }
        };
        let train_q: Vec<&[f64]> = train.iter().map(|p| p.query.as_slice()).collect();
        let mut codebook = Codebook::fit_online(&train_q, &QuantizerConfig::new(vigilance, cfg.learn_rate))?;
        if codebook.len() < 2 {
            return Err(Error::Degenerate(format!(
                "clustering produced {} representative(s) at vigilance {vigilance}; lower the vigilance",
                codebook.len()
            )));
        }
        let models = regressors::train_ensemble(&codebook, &train, &cfg.model)?;
        let train_groups = codebook.partition(&train)?;
        for (k, group) in codebook.partition(&test)?.iter().enumerate() {
            let eval_set = if group.is_empty() { &train_groups[k] } else { group };
            let epe = regressors::evaluate(&models[k], eval_set, regressors::DEFAULT_EPS_Y)?.epe;
            codebook.set_epe(k, epe);
        }
        let calibration: Vec<QueryVector> = train.iter().chain(&test).map(|p| p.query.clone()).collect();
        let detector = CusumDetector::calibrate(&codebook, &calibration, &cfg.cdm)?;
        Ok(Self::from_snapshot(Snapshot {
            domain,
            scaler,
            codebook,
            models,
            detector,
            calibration,
            cfg,
        }))
    }

    fn from_snapshot(state: Snapshot) -> Self {
        Self {
            state,
            session: None,
            session_opened: 0,
            metrics: Vec::new(),
            retry: VecDeque::new(),
            cycles: Vec::new(),
            abandoned: Vec::new(),
            detections: Vec::new(),
            in_alarm: false,
            oracle_calls: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        if self.session.is_some() {
            Mode::Buffering
        } else {
            Mode::Prediction
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.state.cfg
    }

    pub fn domain(&self) -> &[Bounds] {
        &self.state.domain
    }

    pub fn scaler(&self) -> &Standardizer {
        &self.state.scaler
    }

    pub fn codebook(&self) -> &Codebook {
        &self.state.codebook
    }

    pub fn models(&self) -> &[TrainedModel] {
        &self.state.models
    }

    pub fn detector(&self) -> &CusumDetector {
        &self.state.detector
    }

    pub fn session(&self) -> Option<&AdaptationSession> {
        self.session.as_ref()
    }

    pub fn metrics(&self) -> &[MetricRow] {
        &self.metrics
    }

    pub fn cycles(&self) -> &[Cycle] {
        &self.cycles
    }

    /// Query times at which a session was abandoned as a false start.
    pub fn abandoned(&self) -> &[usize] {
        &self.abandoned
    }

    /// Query times at which drift was signalled.
    pub fn detections(&self) -> &[usize] {
        &self.detections
    }

    pub fn oracle_calls(&self) -> usize {
        self.oracle_calls
    }

    /// Queries whose execution failed while buffering, oldest first.
    pub fn retry_queue(&self) -> &VecDeque<RangeQuery> {
        &self.retry
    }

    /// Standardized query vector of `q`.
    pub fn embed(&self, q: &RangeQuery) -> Result<Vec<f64>> {
        let v = vectorize(q, &self.state.domain)?;
        Ok(self.state.scaler.transform(v.as_slice()))
    }

    /// Prediction by the closest cluster's model, without side effects.
    pub fn predict(&self, q: &RangeQuery) -> Result<f64> {
        let z = self.embed(q)?;
        regressors::ensemble_predict(&self.state.codebook, &self.state.models, &z)
    }

    /// Whether a fresh copy of the detector would signal drift on this
    /// stream. The device itself is not modified.
    pub fn probe(&self, queries: &[RangeQuery]) -> Result<bool> {
        let mut det = self.state.detector.clone();
        det.reset();
        for q in queries {
            let z = self.embed(q)?;
            let (u, _) = det.error_of(&self.state.codebook, &z)?;
            if det.step(u).drift {
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Answers one query. In prediction mode the oracle is never called.
    /// In buffering mode forwarded queries are executed through `oracle`;
    /// if that fails the query is queued for [`Self::retry_pending`] and
    /// the error is returned.
    pub fn answer<F>(&mut self, q: &RangeQuery, oracle: F) -> Result<Answer>
    where
        F: FnMut(&RangeQuery) -> Result<f64>,
    {
        let z = self.embed(q)?;
        let t = self.metrics.len() + 1;
        if self.session.is_none() {
            let (u, a) = self.state.detector.error_of(&self.state.codebook, &z)?;
            let rec = self.state.detector.step(u);
            if !rec.drift || !self.state.cfg.adapt {
                if rec.drift && !self.in_alarm {
                    self.detections.push(t);
                }
                self.in_alarm = rec.drift;
                let value = self.state.models[a.closest].predict(&z)?;
                self.metrics.push(MetricRow {
                    t,
                    mode: Mode::Prediction,
                    provenance: Provenance::Predicted,
                    y_hat: value,
                    y_true: None,
                    u_tilde: Some(u),
                    g: Some(rec.g),
                    k: self.state.codebook.len(),
                });
                return Ok(Answer {
                    value,
                    provenance: Provenance::Predicted,
                });
            }
            self.detections.push(t);
            self.session = Some(AdaptationSession::open(self.state.cfg.adm)?);
            self.session_opened = t;
        }
        self.answer_buffering(q, &z, t, oracle)
    }

    fn answer_buffering<F>(&mut self, q: &RangeQuery, z: &[f64], t: usize, mut oracle: F) -> Result<Answer>
    where
        F: FnMut(&RangeQuery) -> Result<f64>,
    {
        let session = self.session.as_mut().expect("buffering mode has a session");
        let k = self.state.codebook.len();
        let (value, provenance) = match session.route(&self.state.codebook, z)? {
            Decision::Local(j) => (self.state.models[j].predict(z)?, Provenance::Predicted),
            Decision::Forward => {
                let y = match oracle(q) {
                    Ok(y) => y,
                    Err(e) => {
                        self.retry.push_back(q.clone());
                        return Err(e);
                    }
                };
                self.oracle_calls += 1;
                session.ingest_forwarded(QueryAnswerPair::new(QueryVector::new(z.to_vec()), y)?)?;
                (y, Provenance::Executed)
            }
        };
        self.metrics.push(MetricRow {
            t,
            mode: Mode::Buffering,
            provenance,
            y_hat: value,
            y_true: (provenance == Provenance::Executed).then_some(value),
            u_tilde: None,
            g: None,
            k,
        });
        if provenance == Provenance::Executed && session.check_convergence() {
            self.finish_session(t)?;
        } else if session.is_stale() {
            // nothing novel is arriving: return to prediction with a fresh statistic
            self.session = None;
            self.state.detector.reset();
            self.abandoned.push(t);
        }
        Ok(Answer { value, provenance })
    }

    fn finish_session(&mut self, t: usize) -> Result<()> {
        let session = self.session.take().expect("session present");
        let k_before = self.state.codebook.len();
        let forwarded = session.buffer().len();
        let affiliates = session.affiliate_len();
        let out = session.finalize(&mut self.state.codebook, &mut self.state.models, &self.state.cfg.model)?;
        self.state.calibration.extend(out.queries);
        self.state.detector =
            CusumDetector::calibrate(&self.state.codebook, &self.state.calibration, &self.state.cfg.cdm)?;
        self.cycles.push(Cycle {
            t_detect: self.session_opened,
            t_finalize: t,
            k_before,
            k_after: self.state.codebook.len(),
            forwarded,
            affiliates,
        });
        Ok(())
    }

    /// Re-answers queued queries in order; stops at the first failure,
    /// which stays queued.
    pub fn retry_pending<F>(&mut self, mut oracle: F) -> Result<Vec<Answer>>
    where
        F: FnMut(&RangeQuery) -> Result<f64>,
    {
        let mut out = Vec::new();
        while let Some(q) = self.retry.pop_front() {
            match self.answer(&q, &mut oracle) {
                Ok(a) => out.push(a),
                Err(e) => {
                    // `answer` already re-queued it at the back; restore order
                    if let Some(back) = self.retry.pop_back() {
                        self.retry.push_front(back);
                    }
                    return Err(e);
                }
            }
        }
        Ok(out)
    }

    /// Offers a pair executed for another device. Returns whether this
    /// device's session accepted it; always false outside buffering mode.
    pub fn offer_affiliate(&mut self, source: usize, q: &RangeQuery, y: f64) -> Result<bool> {
        let Some(session) = self.session.as_mut() else {
            return Ok(false);
        };
        let v = vectorize(q, &self.state.domain)?;
        let z = QueryVector::new(self.state.scaler.transform(v.as_slice()));
        session.ingest_affiliate(source, QueryAnswerPair::new(z, y)?, &self.state.codebook)
    }

    /// Attaches the true answer of query `t` (1-based) for evaluation.
    pub fn record_truth(&mut self, t: usize, y: f64) -> Result<()> {
        let row = self
            .metrics
            .get_mut(t.wrapping_sub(1))
            .ok_or_else(|| Error::State(format!("no answered query at t = {t}")))?;
        row.y_true = Some(y);
        Ok(())
    }

    /// Writes the per-query log as CSV:
    /// `t,mode,provenance,y_hat,y_true,u_tilde,G,K`.
    pub fn write_metrics_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "mode", "provenance", "y_hat", "y_true", "u_tilde", "G", "K"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.metrics {
            w.write_record([
                r.t.to_string(),
                r.mode.as_str().to_string(),
                r.provenance.as_str().to_string(),
                r.y_hat.to_string(),
                opt(r.y_true),
                opt(r.u_tilde),
                opt(r.g),
                r.k.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Versioned JSON of the learned state (codebook, models, detector).
    /// Only available in prediction mode.
    pub fn to_json(&self) -> Result<String> {
        if self.session.is_some() {
            return Err(Error::State("cannot snapshot a device while buffering".into()));
        }
        Ok(serde_json::to_string(&DeviceDocument {
            format: DEVICE_FORMAT.into(),
            version: DEVICE_VERSION,
            device: self.state.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: DeviceDocument = serde_json::from_str(s)?;
        if doc.format != DEVICE_FORMAT || doc.version != DEVICE_VERSION {
            return Err(Error::Parse(format!(
                "unsupported device document {} v{}",
                doc.format, doc.version
            )));
        }
        if doc.device.models.len() != doc.device.codebook.len() {
            return Err(Error::Parse("model and representative counts differ".into()));
        }
        Ok(Self::from_snapshot(doc.device))
    }
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::*;
    use crate::datamodel::execute_exact;
    use crate::simulator::{drift_inputs, DriftConfig, DriftInputs};

    fn scenario() -> (DriftInputs, EngineConfig) {
        let cfg = DriftConfig {
            rows: 20_000,
            bootstrap_queries: 600,
            ..DriftConfig::default()
        };
        (drift_inputs(&cfg).unwrap(), cfg.engine)
    }

    fn device(inputs: &DriftInputs, cfg: EngineConfig) -> AnalystDevice {
        let domain = inputs.table.domain().to_vec();
        let pairs = to_pairs(inputs.bootstrap.iter().map(|q| (&q.predicates, q.answer)), &domain).unwrap();
        AnalystDevice::bootstrap(domain, &pairs, cfg).unwrap()
    }

    fn exact(inputs: &DriftInputs) -> impl Fn(&RangeQuery) -> Result<f64> + '_ {
        let agg = inputs.bootstrap[0].agg;
        move |q| execute_exact(&inputs.table, q, &agg)
    }

    fn never(_: &RangeQuery) -> Result<f64> {
        panic!("oracle called")
    }

    /// Streams known queries, then novel ones until the device buffers.
    fn into_buffering(dev: &mut AnalystDevice, inputs: &DriftInputs) -> usize {
        for q in &inputs.known {
            dev.answer(&q.predicates, never).unwrap();
        }
        let oracle = exact(inputs);
        for (i, q) in inputs.novel.iter().enumerate() {
            dev.answer(&q.predicates, &oracle).unwrap();
            if dev.mode() == Mode::Buffering {
                return i + 1;
            }
        }
        panic!("drift never detected");
    }

    #[test]
    fn bootstrap_is_deterministic_and_round_trips() {
        let (inputs, cfg) = scenario();
        let a = device(&inputs, cfg);
        let b = device(&inputs, cfg);
        let json = a.to_json().unwrap();
        assert_eq!(json, b.to_json().unwrap());
        assert_eq!(AnalystDevice::from_json(&json).unwrap().to_json().unwrap(), json);
        assert!(a.codebook().len() >= 2);
        assert_eq!(a.models().len(), a.codebook().len());
        assert!(a.codebook().all_stats().iter().all(|s| s.member_count >= 1));
        assert_eq!(a.mode(), Mode::Prediction);
    }

    #[test]
    fn single_cluster_bootstrap_is_degenerate() {
        let (inputs, mut cfg) = scenario();
        cfg.vigilance = Some(1e9);
        let domain = inputs.table.domain().to_vec();
        let pairs = to_pairs(inputs.bootstrap.iter().map(|q| (&q.predicates, q.answer)), &domain).unwrap();
        let err = AnalystDevice::bootstrap(domain, &pairs, cfg).unwrap_err();
        assert!(matches!(err, Error::Degenerate(m) if m.contains("lower the vigilance")));
    }

    #[test]
    fn prediction_mode_never_calls_the_oracle() {
        let (inputs, cfg) = scenario();
        let mut dev = device(&inputs, cfg);
        for (i, q) in inputs.known.iter().enumerate() {
            let a = dev.answer(&q.predicates, never).unwrap();
            assert_eq!(a.provenance, Provenance::Predicted);
            assert_eq!(dev.metrics().len(), i + 1);
        }
        assert_eq!(dev.mode(), Mode::Prediction);
        assert_eq!(dev.oracle_calls(), 0);
        assert!(dev.metrics().iter().all(|r| r.u_tilde.is_some() && r.g.is_some()));
    }

    #[test]
    fn drift_cycle_adds_a_representative() {
        let (inputs, cfg) = scenario();
        let mut dev = device(&inputs, cfg);
        let k0 = dev.codebook().len();
        let calls = Cell::new(0);
        let oracle = exact(&inputs);
        let counting = |q: &RangeQuery| {
            calls.set(calls.get() + 1);
            oracle(q)
        };
        for (t, q) in inputs.known.iter().chain(&inputs.novel).enumerate() {
            let a = dev.answer(&q.predicates, counting).unwrap();
            dev.record_truth(t + 1, q.answer).unwrap();
            assert_eq!(dev.metrics().len(), t + 1);
            if a.provenance == Provenance::Executed {
                assert_eq!(a.value, q.answer);
            }
        }
        let t_drift = inputs.known.len() + 1;
        let cycle = dev.cycles().first().expect("one adaptation cycle");
        assert!(cycle.t_detect >= t_drift);
        assert!(cycle.k_after > cycle.k_before && cycle.k_before == k0);
        assert_eq!(dev.mode(), Mode::Prediction);
        assert_eq!(dev.oracle_calls(), calls.get());
        for r in dev.metrics() {
            let inside = r.t >= cycle.t_detect && r.t <= cycle.t_finalize;
            assert_eq!(r.mode == Mode::Buffering, inside, "t = {}", r.t);
        }
    }

    #[test]
    fn buffering_answers_known_queries_locally() {
        let (inputs, cfg) = scenario();
        let mut dev = device(&inputs, cfg);
        into_buffering(&mut dev, &inputs);
        assert!(dev.session().is_some());
        assert!(matches!(dev.to_json(), Err(Error::State(_))));
        let k = dev.codebook().len();
        for q in inputs.bootstrap.iter().take(20) {
            let a = dev.answer(&q.predicates, never).unwrap();
            assert_eq!(a.provenance, Provenance::Predicted);
        }
        assert_eq!(dev.codebook().len(), k);
        assert!(dev.metrics().iter().rev().take(20).all(|r| r.mode == Mode::Buffering));
    }

    #[test]
    fn failed_execution_is_queued_for_retry() {
        let (inputs, cfg) = scenario();
        let mut dev = device(&inputs, cfg);
        let used = into_buffering(&mut dev, &inputs);
        let n = dev.metrics().len();
        let failing = |_: &RangeQuery| -> Result<f64> { Err(Error::Oracle("backend down".into())) };
        let err = inputs.novel[used..]
            .iter()
            .find_map(|q| dev.answer(&q.predicates, failing).err())
            .expect("a novel query is forwarded");
        assert!(matches!(err, Error::Oracle(_)));
        assert_eq!(dev.retry_queue().len(), 1);
        let answered_locally = dev.metrics().len() - n;
        let out = dev.retry_pending(exact(&inputs)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].provenance, Provenance::Executed);
        assert!(dev.retry_queue().is_empty());
        assert_eq!(dev.metrics().len(), n + answered_locally + 1);
    }

    #[test]
    fn idle_session_is_abandoned() {
        let (inputs, mut cfg) = scenario();
        cfg.adm.patience = 10;
        let mut dev = device(&inputs, cfg);
        into_buffering(&mut dev, &inputs);
        for q in inputs.bootstrap.iter().take(10) {
            dev.answer(&q.predicates, never).unwrap();
        }
        assert_eq!(dev.mode(), Mode::Prediction);
        assert_eq!(dev.abandoned(), &[dev.metrics().len()]);
        assert!(dev.cycles().is_empty());
        assert_eq!(dev.detector().steps(), 0);
    }

    #[test]
    fn ablation_detects_but_never_executes() {
        let (inputs, cfg) = scenario();
        let mut dev = device(&inputs, EngineConfig { adapt: false, ..cfg });
        for q in inputs.known.iter().chain(&inputs.novel) {
            assert_eq!(
                dev.answer(&q.predicates, never).unwrap().provenance,
                Provenance::Predicted
            );
        }
        assert!(!dev.detections().is_empty());
        assert!(dev.cycles().is_empty());
    }

    #[test]
    fn metrics_csv_columns() {
        let (inputs, cfg) = scenario();
        let mut dev = device(&inputs, cfg);
        dev.answer(&inputs.known[0].predicates, never).unwrap();
        let mut buf = Vec::new();
        dev.write_metrics_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,mode,provenance,y_hat,y_true,u_tilde,G,K"));
        assert!(lines.next().unwrap().starts_with("1,PREDICTION,PREDICTED,"));
    }
}
