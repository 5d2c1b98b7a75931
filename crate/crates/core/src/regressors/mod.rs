//! Per-cluster regression models mapping a query vector to its answer, and
//! the evaluation utilities (EPE, relative error) built on them.

mod knn;
mod linear;

pub use knn::KnnModel;
pub use linear::LinearModel;

use serde::{Deserialize, Serialize};

use crate::datamodel::QueryAnswerPair;
use crate::error::{Error, Result};
use crate::quantizer::Codebook;
use crate::stats;

/// Guard used in place of `|y|` when the true answer is near zero.
pub const DEFAULT_EPS_Y: f64 = 1.0;

/// Model family and its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModelSpec {
    Ridge { alpha: f64 },
    SgdLinear { step: f64, epochs: usize, seed: u64 },
    Knn { k: usize },
}

impl ModelSpec {
    pub fn ridge() -> Self {
        ModelSpec::Ridge { alpha: 1.0 }
    }

    pub fn sgd() -> Self {
        ModelSpec::SgdLinear {
            step: 0.5,
            epochs: 30,
            seed: 0,
        }
    }

    pub fn knn() -> Self {
        ModelSpec::Knn { k: 5 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Ridge { .. } => "RIDGE",
            ModelSpec::SgdLinear { .. } => "SGD_LINEAR",
            ModelSpec::Knn { .. } => "KNN",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ModelSpec::Ridge { alpha } if !(alpha >= 0.0 && alpha.is_finite()) => {
                Err(Error::Config(format!("ridge alpha must be >= 0, got {alpha}")))
            }
            ModelSpec::SgdLinear { step, .. } if !(step > 0.0 && step < 2.0) => {
                Err(Error::Config(format!("SGD step must be in (0, 2), got {step}")))
            }
            ModelSpec::Knn { k: 0 } => Err(Error::Config("KNN needs k >= 1".into())),
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ridge" => Ok(Self::ridge()),
            "sgd" | "sgd_linear" => Ok(Self::sgd()),
            "knn" => Ok(Self::knn()),
            other => Err(Error::Parse(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Params {
    Linear(LinearModel),
    Knn(KnnModel),
}

/// A fitted model; immutable after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    spec: ModelSpec,
    input_dim: usize,
    params: Params,
}

impl TrainedModel {
    /// Wraps hand-set linear coefficients (raw input units) as a ridge model.
    pub fn linear(weights: Vec<f64>, bias: f64) -> Self {
        Self {
            spec: ModelSpec::Ridge { alpha: 0.0 },
            input_dim: weights.len(),
            params: Params::Linear(LinearModel::from_coefficients(weights, bias)),
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Linear coefficients in raw units, if this is a linear model.
    pub fn coefficients(&self) -> Option<(Vec<f64>, f64)> {
        match &self.params {
            Params::Linear(m) => Some(m.coefficients()),
            Params::Knn(_) => None,
        }
    }

    /// Serialized size in bytes of the JSON encoding.
    pub fn size_bytes(&self) -> usize {
        serde_json::to_vec(self).map_or(0, |v| v.len())
    }

    pub fn predict(&self, q: &[f64]) -> Result<f64> {
        if q.len() != self.input_dim {
            return Err(Error::Dimensionality(format!(
                "model expects {} inputs, got {}",
                self.input_dim,
                q.len()
            )));
        }
        Ok(self.predict_unchecked(q))
    }

    pub(crate) fn predict_unchecked(&self, q: &[f64]) -> f64 {
        match &self.params {
            Params::Linear(m) => m.predict(q),
            Params::Knn(m) => m.predict(q),
        }
    }
}

/// Fits `spec` on the pairs.
pub fn train(spec: &ModelSpec, data: &[QueryAnswerPair]) -> Result<TrainedModel> {
    spec.validate()?;
    let first = data
        .first()
        .ok_or_else(|| Error::Config("cannot train on an empty data set".into()))?;
    let input_dim = first.query.len();
    if let Some(bad) = data.iter().find(|p| p.query.len() != input_dim) {
        return Err(Error::Dimensionality(format!(
            "training vectors of lengths {input_dim} and {}",
            bad.query.len()
        )));
    }
    let params = match *spec {
        ModelSpec::Ridge { alpha } => Params::Linear(LinearModel::fit_ridge(data, alpha)?),
        ModelSpec::SgdLinear { step, epochs, seed } => Params::Linear(LinearModel::fit_sgd(data, step, epochs, seed)?),
        ModelSpec::Knn { k } => Params::Knn(KnnModel::fit(data, k)),
    };
    Ok(TrainedModel {
        spec: *spec,
        input_dim,
        params,
    })
}

/// Test-set error summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean squared residual.
    pub epe: f64,
    /// Median of `|y_hat - y| / max(|y|, eps_y)`.
    pub median_rel_err: f64,
    pub n_test: usize,
}

/// `|y_hat - y| / max(|y|, eps_y)`.
pub fn relative_error(y_hat: f64, y: f64, eps_y: f64) -> f64 {
    (y_hat - y).abs() / y.abs().max(eps_y)
}

pub fn evaluate(model: &TrainedModel, test: &[QueryAnswerPair], eps_y: f64) -> Result<EvalReport> {
    let mut predictions = Vec::with_capacity(test.len());
    for p in test {
        predictions.push(model.predict(p.query.as_slice())?);
    }
    report(&predictions, test, eps_y)
}

/// Builds an [`EvalReport`] from predictions aligned with `test`.
pub fn report(predictions: &[f64], test: &[QueryAnswerPair], eps_y: f64) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Config("evaluation on an empty test set".into()));
    }
    let mut sq = 0.0;
    let mut rel = Vec::with_capacity(test.len());
    for (y_hat, p) in predictions.iter().zip(test) {
        sq += (y_hat - p.answer).powi(2);
        rel.push(relative_error(*y_hat, p.answer, eps_y));
    }
    Ok(EvalReport {
        epe: sq / test.len() as f64,
        median_rel_err: stats::median(&rel),
        n_test: test.len(),
    })
}

/// Trains one model per cluster on the pairs partitioned by `codebook`.
pub fn train_ensemble(codebook: &Codebook, pairs: &[QueryAnswerPair], spec: &ModelSpec) -> Result<Vec<TrainedModel>> {
    codebook
        .partition(pairs)?
        .iter()
        .enumerate()
        .map(|(k, subset)| {
            if subset.is_empty() {
                return Err(Error::State(format!("cluster {k} received no training pairs")));
            }
            train(spec, subset)
        })
        .collect()
}

/// Answers with the model of the closest representative only.
pub fn ensemble_predict(codebook: &Codebook, models: &[TrainedModel], q: &[f64]) -> Result<f64> {
    let k = codebook.assign(q)?.closest;
    let model = models
        .get(k)
        .ok_or_else(|| Error::State(format!("no model for cluster {k}")))?;
    model.predict(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::QueryVector;

    fn pair(x: &[f64], y: f64) -> QueryAnswerPair {
        QueryAnswerPair::new(QueryVector::new(x.to_vec()), y).unwrap()
    }

    #[test]
    fn ridge_recovers_exact_line() {
        let data: Vec<_> = (0..20).map(|i| pair(&[i as f64], 2.0 * i as f64 + 1.0)).collect();
        let m = train(&ModelSpec::Ridge { alpha: 1e-8 }, &data).unwrap();
        let (w, b) = m.coefficients().unwrap();
        assert!((w[0] - 2.0).abs() < 1e-4, "{w:?}");
        assert!((b - 1.0).abs() < 1e-4, "{b}");
    }

    #[test]
    fn ridge_singular_without_penalty() {
        // second input is constant, so Z'Z has a zero row
        let data: Vec<_> = (0..10).map(|i| pair(&[i as f64, 7.0], i as f64)).collect();
        let err = train(&ModelSpec::Ridge { alpha: 0.0 }, &data).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert!(train(&ModelSpec::Ridge { alpha: 1.0 }, &data).is_ok());
    }

    #[test]
    fn constant_targets_reproduced() {
        let data: Vec<_> = (0..50).map(|i| pair(&[i as f64, (i * i % 7) as f64], 3.0)).collect();
        let knn = train(&ModelSpec::knn(), &data).unwrap();
        let ridge = train(&ModelSpec::ridge(), &data).unwrap();
        let sgd = train(&ModelSpec::sgd(), &data).unwrap();
        for p in &data {
            let x = p.query.as_slice();
            assert_eq!(knn.predict(x).unwrap(), 3.0);
            assert!((ridge.predict(x).unwrap() - 3.0).abs() < 1e-6);
            assert!((sgd.predict(x).unwrap() - 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn knn_one_neighbour_interpolates_training_set() {
        let data: Vec<_> = (0..30)
            .map(|i| pair(&[i as f64, (i % 4) as f64], (i * 13 % 11) as f64))
            .collect();
        let m = train(&ModelSpec::Knn { k: 1 }, &data).unwrap();
        let r = evaluate(&m, &data, DEFAULT_EPS_Y).unwrap();
        assert_eq!(r.epe, 0.0);
    }

    #[test]
    fn hand_set_linear_prediction() {
        let m = TrainedModel::linear(vec![2.0, 1.0], 0.0);
        assert_eq!(m.predict(&[3.0, 4.0]).unwrap(), 10.0);
        assert!(matches!(m.predict(&[1.0]), Err(Error::Dimensionality(_))));
    }

    #[test]
    fn knn_mean_of_equidistant_neighbours() {
        let data = vec![pair(&[0.0], 4.0), pair(&[2.0], 6.0), pair(&[10.0], 100.0)];
        let m = train(&ModelSpec::Knn { k: 2 }, &data).unwrap();
        assert_eq!(m.predict(&[1.0]).unwrap(), 5.0);
    }

    #[test]
    fn sgd_zero_epochs_predicts_zero() {
        let data: Vec<_> = (0..10).map(|i| pair(&[i as f64, 1.0], 5.0)).collect();
        let m = train(
            &ModelSpec::SgdLinear {
                step: 0.5,
                epochs: 0,
                seed: 1,
            },
            &data,
        )
        .unwrap();
        assert_eq!(m.predict(&[123.0, -4.0]).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_arithmetic() {
        let m = TrainedModel::linear(vec![0.0], 0.0);
        let data = vec![pair(&[0.0], 0.0)];
        let r = evaluate(&m, &data, DEFAULT_EPS_Y).unwrap();
        assert_eq!((r.epe, r.median_rel_err), (0.0, 0.0));

        // residuals {1, -1, 3}
        let data = vec![pair(&[0.0], -1.0), pair(&[0.0], 1.0), pair(&[0.0], -3.0)];
        let r = evaluate(&m, &data, DEFAULT_EPS_Y).unwrap();
        assert!((r.epe - 11.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.median_rel_err, 1.0);
        assert!(evaluate(&m, &[], 1.0).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        let data = vec![pair(&[0.0], 1.0)];
        assert!(train(&ModelSpec::Knn { k: 0 }, &data).is_err());
        assert!(train(&ModelSpec::Ridge { alpha: -1.0 }, &data).is_err());
        assert!(train(&ModelSpec::ridge(), &[]).is_err());
    }

    #[test]
    fn ensemble_dispatches_to_closest() {
        let book =
            Codebook::from_representatives(vec![QueryVector::new(vec![0.0]), QueryVector::new(vec![10.0])]).unwrap();
        let models = vec![
            TrainedModel::linear(vec![0.0], 1.0),
            TrainedModel::linear(vec![0.0], 2.0),
        ];
        assert_eq!(ensemble_predict(&book, &models, &[0.0]).unwrap(), 1.0);
        assert_eq!(ensemble_predict(&book, &models, &[10.0]).unwrap(), 2.0);
        assert!(matches!(
            ensemble_predict(&book, &models[..1], &[10.0]),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn model_json_round_trip() {
        let data: Vec<_> = (0..10).map(|i| pair(&[i as f64], i as f64)).collect();
        for spec in [ModelSpec::ridge(), ModelSpec::knn()] {
            let m = train(&spec, &data).unwrap();
            let back: TrainedModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
            assert_eq!(back, m);
            assert!(m.size_bytes() > 0);
        }
    }
}
