use serde::{Deserialize, Serialize};

use crate::datamodel::{squared_distance, QueryAnswerPair};
use crate::stats::Standardizer;

/// Distance-weighted k-nearest-neighbour regressor over standardized inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    k: usize,
    scaler: Standardizer,
    points: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

impl KnnModel {
    pub fn fit(data: &[QueryAnswerPair], k: usize) -> Self {
        let xs: Vec<&[f64]> = data.iter().map(|p| p.query.as_slice()).collect();
        let scaler = Standardizer::fit(&xs);
        Self {
            k,
            points: xs.iter().map(|x| scaler.transform(x)).collect(),
            targets: data.iter().map(|p| p.answer).collect(),
            scaler,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.scaler.dim()
    }

    /// Mean of the `k` nearest targets weighted by inverse distance. Exact
    /// matches among the neighbours take all the weight.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let z = self.scaler.transform(x);
        let k = self.k.min(self.points.len());
        // (squared distance, index), kept sorted ascending; ties keep the lower index
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for (i, p) in self.points.iter().enumerate() {
            let d = squared_distance(&z, p);
            if best.len() == k && d >= best[k - 1].0 {
                continue;
            }
            let pos = best.partition_point(|&(bd, _)| bd <= d);
            best.insert(pos, (d, i));
            best.truncate(k);
        }
        let exact: Vec<f64> = best
            .iter()
            .filter(|(d, _)| *d == 0.0)
            .map(|&(_, i)| self.targets[i])
            .collect();
        if !exact.is_empty() {
            return exact.iter().sum::<f64>() / exact.len() as f64;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for &(d, i) in &best {
            let w = 1.0 / d.sqrt();
            num += w * self.targets[i];
            den += w;
        }
        num / den
    }
}
