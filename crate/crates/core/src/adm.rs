//! Adaptation: selective forwarding of novel queries, sign-SGD convergence
//! of a new representative to their component-wise median, affiliate
//! reciprocity between devices, and codebook/model expansion.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datamodel::{squared_distance, QueryAnswerPair, QueryVector};
use crate::error::{Error, Result};
use crate::quantizer::{ClusterStats, Codebook};
use crate::regressors::{self, ModelSpec, TrainedModel};

/// Which side of the rival radius an affiliate query must fall on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffiliateRule {
    /// Accept iff `|q_j - w_rival| <= lambda * sigma_rival`.
    #[default]
    Literal,
    /// Accept iff `|q_j - w_rival| > lambda * sigma_rival`.
    Inverted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmConfig {
    /// Forwarding factor.
    pub lambda: f64,
    /// Convergence threshold on the norm of the last prototype update.
    pub c: f64,
    /// Minimum buffered pairs before convergence may be declared.
    pub min_buffer: usize,
    pub affiliate_rule: AffiliateRule,
    /// Consecutive local answers after which a session is considered a
    /// false start and abandoned by its device.
    pub patience: usize,
}

impl Default for AdmConfig {
    fn default() -> Self {
        Self {
            lambda: 3.0,
            c: 0.008,
            min_buffer: 20,
            affiliate_rule: AffiliateRule::Literal,
            patience: 100,
        }
    }
}

impl AdmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("c must be positive, got {}", self.c)));
        }
        if self.min_buffer == 0 || self.patience == 0 {
            return Err(Error::Config("min_buffer and patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// Routing of a query while a session is open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    /// Execute at the central system and buffer the pair.
    Forward,
    /// Answer locally with the model of this codebook entry.
    Local(usize),
}

/// Forwarding rule over `W ∪ {w_new}`. When no new prototype exists yet
/// the query itself plays that role, so the rival is the closest existing
/// representative. Ties between `w_new` and an existing entry go to the
/// existing one.
pub fn should_forward(codebook: &Codebook, w_new: Option<&[f64]>, q: &[f64], lambda: f64) -> Result<Decision> {
    let a = codebook.assign(q)?;
    let d_new = w_new.map_or(0.0, |w| squared_distance(q, w));
    if a.closest_dist <= d_new {
        return Ok(Decision::Local(a.closest));
    }
    // w_new is closest; the rival is the closest existing entry
    let rival = a.closest;
    if a.closest_dist.sqrt() > lambda * codebook.stats(rival).sigma() {
        Ok(Decision::Forward)
    } else {
        Ok(Decision::Local(rival))
    }
}

/// Pairs and prototype contributed by one affiliate device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affiliate {
    pub source: usize,
    pub prototype: QueryVector,
    pub pairs: Vec<QueryAnswerPair>,
}

/// One row of the session trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub step: usize,
    pub event: &'static str,
    pub served_by: Option<usize>,
    pub gamma: f64,
    pub delta: f64,
    pub q_len: usize,
    pub qa_len: usize,
}

/// Result of [`AdaptationSession::finalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Finalized {
    /// Codebook ids of the appended entries; the first is the session's own.
    pub added: Vec<usize>,
    /// Queries of all appended clusters, for detector recalibration.
    pub queries: Vec<QueryVector>,
}

/// Buffering-mode state for one device.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationSession {
    cfg: AdmConfig,
    w_new: Option<QueryVector>,
    buffer: Vec<QueryAnswerPair>,
    affiliates: Vec<Affiliate>,
    qa_len: usize,
    gamma: f64,
    last_delta: f64,
    converged: bool,
    steps: usize,
    /// Local answers since the last forwarded query.
    idle: usize,
    trace: Vec<SessionEvent>,
}

impl AdaptationSession {
    /// Opens a session with no prototype; the first forwarded query
    /// becomes it.
    pub fn open(cfg: AdmConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = Self {
            cfg,
            w_new: None,
            buffer: Vec::new(),
            affiliates: Vec::new(),
            qa_len: 0,
            gamma: 0.0,
            last_delta: f64::INFINITY,
            converged: false,
            steps: 0,
            idle: 0,
            trace: Vec::new(),
        };
        s.gamma = s.fresh_gamma();
        Ok(s)
    }

    /// Opens a session seeded with its first forwarded pair.
    pub fn start(cfg: AdmConfig, first: QueryAnswerPair) -> Result<Self> {
        let mut s = Self::open(cfg)?;
        s.ingest_forwarded(first)?;
        Ok(s)
    }

    fn fresh_gamma(&self) -> f64 {
        1.0 / (1 + self.buffer.len() + self.qa_len) as f64
    }

    fn log(&mut self, event: &'static str, served_by: Option<usize>, delta: f64) {
        self.steps += 1;
        self.trace.push(SessionEvent {
            step: self.steps,
            event,
            served_by,
            gamma: self.gamma,
            delta,
            q_len: self.buffer.len(),
            qa_len: self.qa_len,
        });
    }

    pub fn config(&self) -> &AdmConfig {
        &self.cfg
    }

    pub fn w_new(&self) -> Option<&QueryVector> {
        self.w_new.as_ref()
    }

    pub fn buffer(&self) -> &[QueryAnswerPair] {
        &self.buffer
    }

    pub fn affiliates(&self) -> &[Affiliate] {
        &self.affiliates
    }

    /// `|Q_A|`: affiliate pairs accepted over all sources.
    pub fn affiliate_len(&self) -> usize {
        self.qa_len
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn last_delta(&self) -> f64 {
        self.last_delta
    }

    pub fn is_converged(&self) -> bool {
        self.converged
    }

    pub fn trace(&self) -> &[SessionEvent] {
        &self.trace
    }

    /// Whether `patience` consecutive queries were answered locally.
    pub fn is_stale(&self) -> bool {
        self.idle >= self.cfg.patience
    }

    /// Routes `q` with the forwarding rule. Records local decisions.
    pub fn route(&mut self, codebook: &Codebook, q: &[f64]) -> Result<Decision> {
        let d = should_forward(
            codebook,
            self.w_new.as_ref().map(QueryVector::as_slice),
            q,
            self.cfg.lambda,
        )?;
        if let Decision::Local(k) = d {
            self.idle += 1;
            self.log("LOCAL", Some(k), self.last_delta);
        }
        Ok(d)
    }

    /// Buffers an executed pair and moves the prototype one sign step
    /// towards it. The first pair initializes the prototype.
    pub fn ingest_forwarded(&mut self, pair: QueryAnswerPair) -> Result<()> {
        let step = self.gamma;
        match &mut self.w_new {
            Some(w) if w.len() != pair.query.len() => {
                return Err(Error::Dimensionality(format!(
                    "forwarded query of length {} for a prototype of length {}",
                    pair.query.len(),
                    w.len()
                )));
            }
            Some(w) => self.last_delta = sign_step(w.as_mut_slice(), pair.query.as_slice(), step),
            None => self.w_new = Some(pair.query.clone()),
        }
        self.idle = 0;
        self.buffer.push(pair);
        self.gamma = self.fresh_gamma();
        self.log("FORWARD", None, self.last_delta);
        Ok(())
    }

    /// Offers a pair executed for device `source`. Returns whether it was
    /// accepted into the affiliate buffer.
    pub fn ingest_affiliate(&mut self, source: usize, pair: QueryAnswerPair, codebook: &Codebook) -> Result<bool> {
        let q = pair.query.as_slice();
        let a = codebook.assign(q)?;
        let d_new = self
            .w_new
            .as_ref()
            .map_or(f64::INFINITY, |w| squared_distance(q, w.as_slice()));
        // rival over W ∪ {w_new}
        let (rival_dist, rival_sigma) = if d_new < a.closest_dist {
            (a.closest_dist, codebook.stats(a.closest).sigma())
        } else if let Some(r) = a.rival.filter(|_| a.rival_dist <= d_new) {
            (a.rival_dist, codebook.stats(r).sigma())
        } else if let Some(w) = &self.w_new {
            let members = self.buffer.iter().map(|p| p.query.as_slice());
            (d_new, ClusterStats::from_members(w.as_slice(), members).sigma())
        } else {
            // single representative and no prototype: no rival exists
            (f64::INFINITY, 0.0)
        };
        let inside = rival_dist.sqrt() <= self.cfg.lambda * rival_sigma;
        let accept = match self.cfg.affiliate_rule {
            AffiliateRule::Literal => inside,
            AffiliateRule::Inverted => !inside,
        };
        if !accept {
            self.log("AFFILIATE_DROP", None, self.last_delta);
            return Ok(false);
        }
        let step = self.gamma;
        match self.affiliates.iter_mut().find(|a| a.source == source) {
            Some(aff) => {
                sign_step(aff.prototype.as_mut_slice(), q, step);
                aff.pairs.push(pair);
            }
            None => self.affiliates.push(Affiliate {
                source,
                prototype: pair.query.clone(),
                pairs: vec![pair],
            }),
        }
        self.qa_len += 1;
        self.gamma = self.fresh_gamma();
        self.log("AFFILIATE_ACCEPT", None, self.last_delta);
        Ok(true)
    }

    /// Converged iff `|Q| >= min_buffer` and the last update was smaller
    /// than `c`.
    pub fn check_convergence(&mut self) -> bool {
        self.converged = self.buffer.len() >= self.cfg.min_buffer && self.last_delta < self.cfg.c;
        self.converged
    }

    /// Trains the new cluster (and every affiliate with at least
    /// `min_buffer` pairs) and appends them to the codebook and model set.
    pub fn finalize(
        self,
        codebook: &mut Codebook,
        models: &mut Vec<TrainedModel>,
        spec: &ModelSpec,
    ) -> Result<Finalized> {
        let w_new = match self.w_new {
            Some(w) if self.converged => w,
            _ => return Err(Error::State("finalize called before convergence".into())),
        };
        let mut groups = vec![(w_new, self.buffer)];
        for aff in self.affiliates {
            if aff.pairs.len() >= self.cfg.min_buffer {
                groups.push((aff.prototype, aff.pairs));
            }
        }
        let mut added = Vec::with_capacity(groups.len());
        let mut queries = Vec::new();
        for (w, pairs) in groups {
            let (model, epe) = train_with_holdout(spec, &pairs)?;
            let mut stats = ClusterStats::from_members(w.as_slice(), pairs.iter().map(|p| p.query.as_slice()));
            stats.epe = epe;
            added.push(codebook.push(w, stats)?);
            models.push(model);
            queries.extend(pairs.into_iter().map(|p| p.query));
        }
        Ok(Finalized { added, queries })
    }

    /// Writes the trace as CSV:
    /// `step,event,served_by,gamma,delta,q_len,qa_len`.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "event", "served_by", "gamma", "delta", "q_len", "qa_len"])?;
        for e in &self.trace {
            w.write_record([
                e.step.to_string(),
                e.event.to_string(),
                e.served_by.map(|k| k.to_string()).unwrap_or_default(),
                e.gamma.to_string(),
                e.delta.to_string(),
                e.q_len.to_string(),
                e.qa_len.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `w += gamma * sgn(q - w)` with `sgn(0) = 0`; returns the L2 norm of the
/// applied update.
pub fn sign_step(w: &mut [f64], q: &[f64], gamma: f64) -> f64 {
    let mut moved = 0usize;
    for (wi, qi) in w.iter_mut().zip(q) {
        let diff = qi - *wi;
        if diff > 0.0 {
            *wi += gamma;
            moved += 1;
        } else if diff < 0.0 {
            *wi -= gamma;
            moved += 1;
        }
    }
    gamma * (moved as f64).sqrt()
}

/// Trains on all pairs; the EPE comes from a model fit with every fifth
/// pair held out. Falls back to training residuals below 5 pairs.
pub fn train_with_holdout(spec: &ModelSpec, pairs: &[QueryAnswerPair]) -> Result<(TrainedModel, f64)> {
    let model = regressors::train(spec, pairs)?;
    let epe = if pairs.len() >= 5 {
        let (test, fit): (Vec<_>, Vec<_>) = pairs.iter().enumerate().partition(|(i, _)| i % 5 == 4);
        let fit: Vec<_> = fit.into_iter().map(|(_, p)| p.clone()).collect();
        let test: Vec<_> = test.into_iter().map(|(_, p)| p.clone()).collect();
        let m = regressors::train(spec, &fit)?;
        regressors::evaluate(&m, &test, regressors::DEFAULT_EPS_Y)?.epe
    } else {
        regressors::evaluate(&model, pairs, regressors::DEFAULT_EPS_Y)?.epe
    };
    Ok((model, epe))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(x: &[f64], y: f64) -> QueryAnswerPair {
        QueryAnswerPair::new(QueryVector::new(x.to_vec()), y).unwrap()
    }

    /// Two representatives at 0 and 100 on a line, both with sigma 1.
    fn line_book() -> Codebook {
        let mut book =
            Codebook::from_representatives(vec![QueryVector::new(vec![0.0]), QueryVector::new(vec![100.0])]).unwrap();
        book.refresh_stats(&[vec![-1.0], vec![1.0], vec![99.0], vec![101.0]]);
        book
    }

    /// Representatives at 0 and 10 with sigma 2, so their radii overlap
    /// on [4, 6].
    fn overlap_book() -> Codebook {
        let mut book =
            Codebook::from_representatives(vec![QueryVector::new(vec![0.0]), QueryVector::new(vec![10.0])]).unwrap();
        book.refresh_stats(&[vec![-2.0], vec![2.0], vec![8.0], vec![12.0]]);
        book
    }

    #[test]
    fn forwarding_rule_cases() {
        let book = line_book();
        assert_eq!(book.stats(0).sigma(), 1.0);
        // closest to an existing representative
        assert_eq!(
            should_forward(&book, Some(&[50.0]), &[1.0], 3.0).unwrap(),
            Decision::Local(0)
        );
        // closest to w_new, inside the rival radius
        assert_eq!(
            should_forward(&book, Some(&[3.0]), &[2.5], 3.0).unwrap(),
            Decision::Local(0)
        );
        // closest to w_new, beyond the rival radius
        assert_eq!(
            should_forward(&book, Some(&[5.0]), &[4.0], 3.0).unwrap(),
            Decision::Forward
        );
        // no prototype yet: the query stands in for it
        assert_eq!(should_forward(&book, None, &[4.0], 3.0).unwrap(), Decision::Forward);
        assert_eq!(should_forward(&book, None, &[2.0], 3.0).unwrap(), Decision::Local(0));
        let empty = Codebook::from_representatives(vec![]);
        assert!(empty.is_err() || should_forward(&empty.unwrap(), None, &[0.0], 3.0).is_err());
    }

    #[test]
    fn first_forward_seeds_prototype() {
        let mut s = AdaptationSession::open(AdmConfig::default()).unwrap();
        assert!(s.w_new().is_none());
        assert_eq!(s.gamma(), 1.0);
        s.ingest_forwarded(pair(&[7.0, -1.0], 3.0)).unwrap();
        assert_eq!(s.w_new().unwrap().as_slice(), &[7.0, -1.0]);
        assert_eq!(s.gamma(), 0.5);
        assert!(s.ingest_forwarded(pair(&[1.0], 3.0)).is_err());
    }

    #[test]
    fn sign_rule() {
        let mut w = vec![0.0, 0.0];
        let d = sign_step(&mut w, &[3.0, -2.0], 0.1);
        assert_eq!(w, vec![0.1, -0.1]);
        assert!((d - 0.1 * 2f64.sqrt()).abs() < 1e-15);
        let mut w = vec![1.0, 2.0];
        assert_eq!(sign_step(&mut w, &[1.0, 2.0], 0.5), 0.0);
        assert_eq!(w, vec![1.0, 2.0]);
    }

    #[test]
    fn gamma_after_mixed_ingests() {
        let book = overlap_book();
        let cfg = AdmConfig::default();
        let mut s = AdaptationSession::start(cfg, pair(&[50.0], 1.0)).unwrap();
        for i in 0..3 {
            s.ingest_forwarded(pair(&[50.0 + i as f64], 1.0)).unwrap();
        }
        for _ in 0..5 {
            // inside the radius of its rival, representative 1
            assert!(s.ingest_affiliate(1, pair(&[4.5], 2.0), &book).unwrap());
        }
        assert_eq!(s.buffer().len(), 4);
        assert_eq!(s.affiliate_len(), 5);
        assert_eq!(s.gamma(), 0.1);
    }

    #[test]
    fn affiliate_radius_and_inversion() {
        let book = overlap_book();
        let mut s = AdaptationSession::start(AdmConfig::default(), pair(&[50.0], 1.0)).unwrap();
        let g0 = s.gamma();
        // closest 0, rival 1 at distance 6 = 3 sigma
        assert!(s.ingest_affiliate(2, pair(&[4.0], 1.0), &book).unwrap());
        assert!(s.gamma() < g0);
        // closest 0, rival 1 at distance 13
        assert!(!s.ingest_affiliate(2, pair(&[-3.0], 1.0), &book).unwrap());
        // closest w_new, rival 1 at distance 30
        assert!(!s.ingest_affiliate(2, pair(&[40.0], 1.0), &book).unwrap());
        assert_eq!(s.affiliate_len(), 1);

        let cfg = AdmConfig {
            affiliate_rule: AffiliateRule::Inverted,
            ..AdmConfig::default()
        };
        let mut s = AdaptationSession::start(cfg, pair(&[50.0], 1.0)).unwrap();
        assert!(!s.ingest_affiliate(2, pair(&[4.0], 1.0), &book).unwrap());
        assert!(s.ingest_affiliate(2, pair(&[40.0], 1.0), &book).unwrap());
    }

    #[test]
    fn convergence_guard() {
        let cfg = AdmConfig {
            min_buffer: 20,
            ..AdmConfig::default()
        };
        let mut s = AdaptationSession::start(cfg, pair(&[0.0], 1.0)).unwrap();
        for _ in 0..5 {
            s.ingest_forwarded(pair(&[0.0], 1.0)).unwrap();
        }
        assert_eq!(s.last_delta(), 0.0);
        assert!(!s.check_convergence());
        for _ in 0..14 {
            s.ingest_forwarded(pair(&[0.0], 1.0)).unwrap();
        }
        assert!(s.check_convergence());
    }

    #[test]
    fn delta_just_below_threshold_converges() {
        let cfg = AdmConfig::default();
        let mut s = AdaptationSession::start(cfg, pair(&[0.0], 1.0)).unwrap();
        for _ in 0..cfg.min_buffer {
            s.ingest_forwarded(pair(&[0.0], 1.0)).unwrap();
        }
        s.last_delta = 0.007;
        assert!(s.check_convergence());
        s.last_delta = 0.008;
        assert!(!s.check_convergence());
    }

    #[test]
    fn finalize_without_affiliates_adds_one() {
        let mut book = line_book();
        let mut models = vec![
            TrainedModel::linear(vec![0.0], 0.0),
            TrainedModel::linear(vec![0.0], 1.0),
        ];
        let mut s = AdaptationSession::start(AdmConfig::default(), pair(&[50.0], 100.0)).unwrap();
        assert!(s.clone().finalize(&mut book, &mut models, &ModelSpec::ridge()).is_err());
        for i in 0..200 {
            let x = 50.0 + (i % 7) as f64 - 3.0;
            s.ingest_forwarded(pair(&[x], 2.0 * x)).unwrap();
        }
        assert!(s.check_convergence());
        let out = s.finalize(&mut book, &mut models, &ModelSpec::ridge()).unwrap();
        assert_eq!(out.added, vec![2]);
        assert_eq!((book.len(), models.len()), (3, 3));
        assert!((models[2].predict(&[51.0]).unwrap() - 102.0).abs() < 1.0);
        assert!(book.stats(2).member_count == 201);
    }

    #[test]
    fn finalize_counts_full_affiliates_only() {
        let mut book = overlap_book();
        let mut models = vec![
            TrainedModel::linear(vec![0.0], 0.0),
            TrainedModel::linear(vec![0.0], 1.0),
        ];
        let cfg = AdmConfig::default();
        let mut s = AdaptationSession::start(cfg, pair(&[50.0], 1.0)).unwrap();
        for i in 0..cfg.min_buffer {
            let x = i as f64 * 0.05;
            assert!(s.ingest_affiliate(1, pair(&[4.0 + x], x), &book).unwrap());
            assert!(s.ingest_affiliate(2, pair(&[5.0 + x], x), &book).unwrap());
        }
        assert!(s.ingest_affiliate(3, pair(&[5.0], 1.0), &book).unwrap());
        for _ in 0..100 {
            s.ingest_forwarded(pair(&[50.0], 1.0)).unwrap();
        }
        assert!(s.check_convergence());
        let out = s.finalize(&mut book, &mut models, &ModelSpec::ridge()).unwrap();
        assert_eq!(out.added.len(), 3);
        assert_eq!(book.len(), 5);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Forward(f64),
        Affiliate(usize, f64),
    }

    proptest! {
        #[test]
        fn gamma_invariant(ops in proptest::collection::vec(
            prop_oneof![
                (-200.0f64..200.0).prop_map(Op::Forward),
                (0usize..4, -200.0f64..200.0).prop_map(|(s, x)| Op::Affiliate(s, x)),
            ],
            0..120,
        )) {
            let book = line_book();
            let mut s = AdaptationSession::start(AdmConfig::default(), pair(&[50.0], 1.0)).unwrap();
            for op in ops {
                let before = s.gamma();
                match op {
                    Op::Forward(x) => s.ingest_forwarded(pair(&[x], 0.0)).unwrap(),
                    Op::Affiliate(src, x) => {
                        if s.ingest_affiliate(src, pair(&[x], 0.0), &book).unwrap() {
                            prop_assert!(s.gamma() < before);
                        }
                    }
                }
                let n = 1 + s.buffer().len() + s.affiliate_len();
                prop_assert_eq!(s.gamma(), 1.0 / n as f64);
                prop_assert!((s.gamma() * n as f64 - 1.0).abs() <= f64::EPSILON);
                prop_assert!(s.gamma() > 0.0 && s.gamma() <= 1.0);
            }
        }
    }

    #[test]
    fn trace_csv_columns() {
        let mut s = AdaptationSession::start(AdmConfig::default(), pair(&[0.0], 1.0)).unwrap();
        s.ingest_forwarded(pair(&[1.0], 1.0)).unwrap();
        let mut buf = Vec::new();
        s.write_trace_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "step,event,served_by,gamma,delta,q_len,qa_len");
        assert_eq!(lines[1], "1,FORWARD,,0.5,inf,1,0");
        assert_eq!(lines[2], "2,FORWARD,,0.3333333333333333,0.5,2,0");
    }
}
