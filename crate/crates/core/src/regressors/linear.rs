use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::QueryAnswerPair;
use crate::error::{Error, Result};
use crate::stats::Standardizer;

/// Linear model over standardized inputs: `y = bias + w . z`,
/// `z = (x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    scaler: Standardizer,
    weights: Vec<f64>,
    bias: f64,
}

impl LinearModel {
    /// A model with the given coefficients in raw input units.
    pub fn from_coefficients(weights: Vec<f64>, bias: f64) -> Self {
        Self {
            scaler: Standardizer::identity(weights.len()),
            weights,
            bias,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.len()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut y = self.bias;
        for ((xi, wi), (m, s)) in x
            .iter()
            .zip(&self.weights)
            .zip(self.scaler.mean().iter().zip(self.scaler.scale()))
        {
            y += wi * (xi - m) / s;
        }
        y
    }

    /// Weights and bias expressed in raw input units.
    pub fn coefficients(&self) -> (Vec<f64>, f64) {
        let mut bias = self.bias;
        let weights = self
            .weights
            .iter()
            .zip(self.scaler.mean().iter().zip(self.scaler.scale()))
            .map(|(w, (m, s))| {
                bias -= w * m / s;
                w / s
            })
            .collect();
        (weights, bias)
    }

    /// Ridge regression: solves `(Z'Z + alpha I) w = Z'(y - mean(y))` by
    /// Cholesky on standardized inputs, intercept unpenalized.
    pub fn fit_ridge(data: &[QueryAnswerPair], alpha: f64) -> Result<Self> {
        let (scaler, z, y) = design(data);
        let n = z.len();
        let p = scaler.dim();
        let y_mean = y.iter().sum::<f64>() / n as f64;

        let mut gram = DMatrix::<f64>::zeros(p, p);
        let mut rhs = DVector::<f64>::zeros(p);
        for (row, &yi) in z.iter().zip(&y) {
            let yc = yi - y_mean;
            for i in 0..p {
                if row[i] == 0.0 {
                    continue;
                }
                rhs[i] += row[i] * yc;
                for j in i..p {
                    gram[(i, j)] += row[i] * row[j];
                }
            }
        }
        for i in 0..p {
            for j in 0..i {
                gram[(i, j)] = gram[(j, i)];
            }
            gram[(i, i)] += alpha;
        }
        let chol = gram.cholesky().ok_or_else(|| {
            Error::Numerical(format!(
                "normal equations are singular (alpha = {alpha}); use a positive ridge penalty"
            ))
        })?;
        let w = chol.solve(&rhs);
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("ridge solution is not finite".into()));
        }
        Ok(Self {
            scaler,
            weights: w.iter().copied().collect(),
            bias: y_mean,
        })
    }

    /// Normalized least-mean-squares: `epochs` shuffled passes of
    /// per-example steps `eta_e * err * z / (1 + |z|^2)` with
    /// `eta_e = step / sqrt(1 + e)`. Weights start at zero.
    pub fn fit_sgd(data: &[QueryAnswerPair], step: f64, epochs: usize, seed: u64) -> Result<Self> {
        let (scaler, z, y) = design(data);
        let p = scaler.dim();
        let mut weights = vec![0.0; p];
        let mut bias = 0.0;
        let norms: Vec<f64> = z.iter().map(|r| 1.0 + r.iter().map(|v| v * v).sum::<f64>()).collect();
        let mut order: Vec<usize> = (0..z.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            let eta = step / (1.0 + epoch as f64).sqrt();
            for &i in &order {
                let row = &z[i];
                let pred = bias + row.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>();
                let g = eta * (pred - y[i]) / norms[i];
                for (w, x) in weights.iter_mut().zip(row) {
                    *w -= g * x;
                }
                bias -= g;
            }
        }
        if weights.iter().any(|v| !v.is_finite()) || !bias.is_finite() {
            return Err(Error::Numerical("SGD diverged".into()));
        }
        Ok(Self { scaler, weights, bias })
    }
}

fn design(data: &[QueryAnswerPair]) -> (Standardizer, Vec<Vec<f64>>, Vec<f64>) {
    let xs: Vec<&[f64]> = data.iter().map(|p| p.query.as_slice()).collect();
    let scaler = Standardizer::fit(&xs);
    let z = xs.iter().map(|x| scaler.transform(x)).collect();
    let y = data.iter().map(|p| p.answer).collect();
    (scaler, z, y)
}
