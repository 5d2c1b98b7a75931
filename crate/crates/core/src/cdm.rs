//! Change detection: a distance-based error proxy computed without executing
//! the query, gamma models of its expected and novel distributions, and a
//! likelihood-ratio CUSUM over the resulting stream.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::quantizer::{Assignment, ClusterStats, Codebook};
use crate::stats;

/// Floor applied to the error proxy before evaluating a gamma density.
pub const DENSITY_FLOOR: f64 = 1e-9;

/// Gamma distribution with `scale` e1 and `shape` e2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub scale: f64,
    pub shape: f64,
}

impl GammaParams {
    pub fn new(scale: f64, shape: f64) -> Result<Self> {
        if !(scale > 0.0 && shape > 0.0 && scale.is_finite() && shape.is_finite()) {
            return Err(Error::Degenerate(format!(
                "gamma parameters must be positive and finite, got scale {scale}, shape {shape}"
            )));
        }
        Ok(Self { scale, shape })
    }

    pub fn mean(&self) -> f64 {
        self.shape * self.scale
    }

    /// Log-density at `x`, with `x` floored at [`DENSITY_FLOOR`].
    pub fn log_pdf(&self, x: f64) -> f64 {
        let x = x.max(DENSITY_FLOOR);
        (self.shape - 1.0) * x.ln() - x / self.scale - ln_gamma(self.shape) - self.shape * self.scale.ln()
    }
}

/// Method-of-moments gamma fit over the positive samples:
/// `shape = mean^2 / var`, `scale = var / mean` (population variance).
pub fn fit_gamma(samples: &[f64]) -> Result<GammaParams> {
    let positive: Vec<f64> = samples.iter().copied().filter(|x| *x > 0.0 && x.is_finite()).collect();
    if positive.len() < 2 {
        return Err(Error::Degenerate(format!(
            "gamma fit needs at least 2 positive samples, got {}",
            positive.len()
        )));
    }
    let m = stats::mean(&positive);
    let v = stats::variance(&positive);
    if !(v > 0.0) {
        return Err(Error::Degenerate("gamma fit on samples with zero variance".into()));
    }
    GammaParams::new(v / m, m * m / v)
}

/// Maximum-likelihood gamma fit over the positive samples: the shape
/// solves `ln k - digamma(k) = ln(mean) - mean(ln x)` (by bisection, the
/// left side is decreasing in `k`) and `scale = mean / shape`.
pub fn fit_gamma_mle(samples: &[f64]) -> Result<GammaParams> {
    let positive: Vec<f64> = samples.iter().copied().filter(|x| *x > 0.0 && x.is_finite()).collect();
    if positive.len() < 2 {
        return Err(Error::Degenerate(format!(
            "gamma fit needs at least 2 positive samples, got {}",
            positive.len()
        )));
    }
    let m = stats::mean(&positive);
    let mean_log = positive.iter().map(|x| x.ln()).sum::<f64>() / positive.len() as f64;
    let target = m.ln() - mean_log;
    if !(target > 1e-12) {
        return Err(Error::Degenerate("gamma fit on samples with zero variance".into()));
    }
    let f = |k: f64| k.ln() - digamma(k) - target;
    let (mut lo, mut hi) = (1e-8f64, 1.0f64);
    while f(hi) > 0.0 && hi < 1e12 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo < 1.0 + 1e-13 {
            break;
        }
    }
    let shape = (lo * hi).sqrt();
    GammaParams::new(m / shape, shape)
}

/// Estimator used for the expected and novel distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaFit {
    Moments,
    #[default]
    MaxLikelihood,
}

impl GammaFit {
    pub fn fit(&self, samples: &[f64]) -> Result<GammaParams> {
        match self {
            GammaFit::Moments => fit_gamma(samples),
            GammaFit::MaxLikelihood => fit_gamma_mle(samples),
        }
    }
}

/// How the log distance term and the cluster EPE combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorForm {
    /// `ln(1 + dd) * u`: the log discounts the expected error.
    #[default]
    Discounted,
    /// `ln(dd + u)`: the alternative grouping; may be negative.
    InsideLog,
}

/// Error proxy from the excess distance `dd = max(0, d - min_dist)` and
/// the cluster's expected error `epe`.
pub fn error_proxy(distance: f64, min_dist: f64, epe: f64, form: ErrorForm) -> f64 {
    let dd = (distance - min_dist).max(0.0);
    match form {
        ErrorForm::Discounted => dd.ln_1p() * epe,
        ErrorForm::InsideLog => (dd + epe).ln(),
    }
}

/// Error proxy of a query at squared distance `distance` from a
/// representative with statistics `stats`.
pub fn distance_error(distance: f64, stats: &ClusterStats) -> f64 {
    error_proxy(distance, stats.min_dist, stats.epe, ErrorForm::Discounted)
}

/// Calibration options.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdmConfig {
    /// Threshold as a multiple of the training-phase std of the proxy.
    pub h_sigmas: f64,
    /// Express the proxy in units of its training-phase mean, so the
    /// proxy, and therefore `h`, does not depend on the answer's units.
    pub normalize: bool,
    pub form: ErrorForm,
    pub fit: GammaFit,
}

impl Default for CdmConfig {
    fn default() -> Self {
        Self {
            h_sigmas: 3.0,
            normalize: true,
            form: ErrorForm::Discounted,
            fit: GammaFit::MaxLikelihood,
        }
    }
}

impl CdmConfig {
    pub fn with_h_sigmas(h_sigmas: f64) -> Self {
        Self {
            h_sigmas,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h_sigmas > 0.0 && self.h_sigmas.is_finite()) {
            return Err(Error::Config(format!(
                "threshold multiplier must be positive, got {}",
                self.h_sigmas
            )));
        }
        Ok(())
    }
}

/// One detector update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub u_tilde: f64,
    pub s: f64,
    pub g: f64,
    pub drift: bool,
}

/// Likelihood-ratio CUSUM over the error proxy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CusumDetector {
    p0: GammaParams,
    p1: GammaParams,
    h: f64,
    sigma_u: f64,
    /// Proxy values below this are scored as if equal to it.
    u_floor: f64,
    epe_scale: f64,
    form: ErrorForm,
    g: f64,
    /// Running sum of log-likelihood ratios and its minimum over prefixes.
    u_sum: f64,
    u_min: f64,
    t: usize,
    t_star: usize,
    t_detect: Option<usize>,
    #[serde(skip)]
    trace: Vec<StepRecord>,
}

impl CusumDetector {
    /// Builds a detector from explicit distributions and threshold.
    pub fn from_params(p0: GammaParams, p1: GammaParams, h: f64, sigma_u: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Config(format!("threshold h must be positive, got {h}")));
        }
        Ok(Self {
            p0,
            p1,
            h,
            sigma_u,
            u_floor: DENSITY_FLOOR,
            epe_scale: 1.0,
            form: ErrorForm::Discounted,
            g: 0.0,
            u_sum: 0.0,
            u_min: 0.0,
            t: 0,
            t_star: 0,
            t_detect: None,
            trace: Vec::new(),
        })
    }

    /// Fits the expected distribution on each query's proxy w.r.t. its
    /// closest representative and the novel one on the proxy w.r.t. its
    /// rival, using the rival's statistics. Needs `K >= 2`.
    pub fn calibrate<Q: AsRef<[f64]>>(codebook: &Codebook, queries: &[Q], cfg: &CdmConfig) -> Result<Self> {
        cfg.validate()?;
        if codebook.len() < 2 {
            return Err(Error::Degenerate(format!(
                "calibration needs at least 2 representatives, found {}; lower the vigilance",
                codebook.len()
            )));
        }
        let mut expected = Vec::with_capacity(queries.len());
        let mut novel = Vec::with_capacity(queries.len());
        for q in queries {
            let a = codebook.assign(q.as_ref())?;
            let rival = a.rival.expect("K >= 2 yields a rival");
            expected.push(proxy(codebook, a.closest, a.closest_dist, 1.0, cfg.form));
            novel.push(proxy(codebook, rival, a.rival_dist, 1.0, cfg.form));
        }
        let mut epe_scale = 1.0;
        if cfg.normalize && cfg.form == ErrorForm::Discounted {
            // the proxy is linear in the EPE, so rescaling the EPE rescales it
            let m = stats::mean(&expected);
            if m > 0.0 && m.is_finite() {
                epe_scale = m;
                expected.iter_mut().chain(novel.iter_mut()).for_each(|u| *u /= m);
            }
        }
        let p0 = cfg.fit.fit(&expected)?;
        let p1 = cfg.fit.fit(&novel)?;
        let sigma_u = stats::std_dev(&expected);
        let mut det = Self::from_params(p0, p1, cfg.h_sigmas * sigma_u, sigma_u)?;
        // below the smallest error seen in calibration the fitted densities
        // are pure extrapolation; near zero a heavier-tailed novel fit would
        // otherwise score a perfect match as strong evidence of drift
        det.u_floor = expected
            .iter()
            .copied()
            .filter(|u| *u > 0.0)
            .fold(f64::INFINITY, f64::min)
            .max(DENSITY_FLOOR);
        det.epe_scale = epe_scale;
        det.form = cfg.form;
        Ok(det)
    }

    /// Error proxy of `q` against its closest representative, with the
    /// assignment used.
    pub fn error_of(&self, codebook: &Codebook, q: &[f64]) -> Result<(f64, Assignment)> {
        let a = codebook.assign(q)?;
        Ok((proxy(codebook, a.closest, a.closest_dist, self.epe_scale, self.form), a))
    }

    /// Log-likelihood ratio `ln p1(u) - ln p0(u)`, with `u` floored at
    /// [`Self::u_floor`].
    pub fn log_ratio(&self, u_tilde: f64) -> f64 {
        let u = u_tilde.max(self.u_floor);
        self.p1.log_pdf(u) - self.p0.log_pdf(u)
    }

    /// Advances the statistic with one proxy value; returns the record of
    /// the step. Detection time is the first step whose `G` exceeds `h`.
    pub fn step(&mut self, u_tilde: f64) -> StepRecord {
        let s = self.log_ratio(u_tilde);
        self.step_ratio(s, u_tilde)
    }

    /// Advances the statistic with a precomputed log-likelihood ratio.
    pub fn step_ratio(&mut self, s: f64, u_tilde: f64) -> StepRecord {
        self.t += 1;
        self.g = (self.g + s).max(0.0);
        self.u_sum += s;
        if self.u_sum < self.u_min {
            self.u_min = self.u_sum;
            self.t_star = self.t;
        }
        let drift = self.g > self.h;
        if drift && self.t_detect.is_none() {
            self.t_detect = Some(self.t);
        }
        let rec = StepRecord {
            t: self.t,
            u_tilde,
            s,
            g: self.g,
            drift,
        };
        self.trace.push(rec);
        rec
    }

    /// Restarts the statistic and trace, keeping the fitted distributions.
    pub fn reset(&mut self) {
        self.g = 0.0;
        self.u_sum = 0.0;
        self.u_min = 0.0;
        self.t = 0;
        self.t_star = 0;
        self.t_detect = None;
        self.trace.clear();
    }

    pub fn p0(&self) -> &GammaParams {
        &self.p0
    }

    pub fn p1(&self) -> &GammaParams {
        &self.p1
    }

    pub fn g(&self) -> f64 {
        self.g
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn set_h(&mut self, h: f64) -> Result<()> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Config(format!("threshold h must be positive, got {h}")));
        }
        self.h = h;
        Ok(())
    }

    pub fn sigma_u(&self) -> f64 {
        self.sigma_u
    }

    pub fn epe_scale(&self) -> f64 {
        self.epe_scale
    }

    /// Smallest proxy value scored as itself: the smallest positive proxy
    /// of the calibration set, or [`DENSITY_FLOOR`] for explicit parameters.
    pub fn u_floor(&self) -> f64 {
        self.u_floor
    }

    /// Steps taken since calibration or the last reset.
    pub fn steps(&self) -> usize {
        self.t
    }

    /// First step with `G > h`.
    pub fn t_detect(&self) -> Option<usize> {
        self.t_detect
    }

    /// Change-time estimate: the step after which the cumulative ratio was
    /// at its minimum.
    pub fn t_star(&self) -> usize {
        self.t_star
    }

    pub fn trace(&self) -> &[StepRecord] {
        &self.trace
    }

    /// Writes the trace as CSV: `t,u_tilde,s,G,drift`.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "u_tilde", "s", "G", "drift"])?;
        for r in &self.trace {
            w.write_record([
                r.t.to_string(),
                r.u_tilde.to_string(),
                r.s.to_string(),
                r.g.to_string(),
                u8::from(r.drift).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn proxy(codebook: &Codebook, k: usize, dist: f64, epe_scale: f64, form: ErrorForm) -> f64 {
    let s = codebook.stats(k);
    error_proxy(dist, s.min_dist, s.epe / epe_scale, form)
}

/// Batch CUSUM: `U_t - min_{0 <= tau <= t} U_tau` with `U_0 = 0`, for every
/// prefix of `s`.
pub fn cusum_batch(s: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(s.len());
    let mut u = 0.0;
    let mut min_u: f64 = 0.0;
    for &x in s {
        u += x;
        min_u = min_u.min(u);
        out.push(u - min_u);
    }
    out
}
