//! Online partitioning of query space into representatives ("query
//! patterns") with the per-cluster statistics used by prediction, change
//! detection and adaptation.
//!
//! Cluster ids are dense indices `0..K`. All distances here are squared
//! Euclidean unless a function says otherwise.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{squared_distance, QueryAnswerPair, QueryVector};
use crate::error::{Error, Result};
use crate::stats;

/// Per-cluster statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub member_count: usize,
    /// Mean squared distance of members to the representative.
    pub variance: f64,
    /// Smallest squared distance between the representative and a member.
    pub min_dist: f64,
    /// Expected squared prediction error of the cluster's model.
    pub epe: f64,
}

impl ClusterStats {
    /// Statistics of `members` around `w`, with `epe` left at 0.
    pub fn from_members<'a, I>(w: &[f64], members: I) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut count = 0usize;
        let mut sum = 0.0;
        let mut min = f64::INFINITY;
        for q in members {
            let d = squared_distance(q, w);
            count += 1;
            sum += d;
            min = min.min(d);
        }
        if count == 0 {
            return Self {
                member_count: 0,
                variance: 0.0,
                min_dist: 0.0,
                epe: 0.0,
            };
        }
        Self {
            member_count: count,
            variance: sum / count as f64,
            min_dist: min,
            epe: 0.0,
        }
    }

    /// Standard deviation of member distances, `sqrt(variance)`.
    pub fn sigma(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Closest and second-closest representatives of a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub closest: usize,
    pub closest_dist: f64,
    /// `None` when the codebook holds a single representative.
    pub rival: Option<usize>,
    pub rival_dist: f64,
}

/// Vigilance and learning rate of the growing quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    /// Spawn threshold on the squared distance to the closest representative.
    pub vigilance: f64,
    /// Step size pulling the winner towards each non-spawning query.
    pub learn_rate: f64,
}

impl QuantizerConfig {
    pub fn new(vigilance: f64, learn_rate: f64) -> Self {
        Self { vigilance, learn_rate }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.vigilance > 0.0) {
            return Err(Error::Config(format!(
                "vigilance must be positive, got {}",
                self.vigilance
            )));
        }
        if !(self.learn_rate > 0.0 && self.learn_rate < 1.0) {
            return Err(Error::Config(format!(
                "learn rate must be in (0, 1), got {}",
                self.learn_rate
            )));
        }
        Ok(())
    }
}

/// Default vigilance: the 0.9-quantile of pairwise squared distances over a
/// bootstrap sample of at most `sample` queries.
pub fn default_vigilance<Q: AsRef<[f64]>>(queries: &[Q], sample: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, queries.len(), sample.min(queries.len())).into_vec();
    let mut dists = Vec::with_capacity(picked.len() * picked.len().saturating_sub(1) / 2);
    for (i, &a) in picked.iter().enumerate() {
        for &b in &picked[i + 1..] {
            dists.push(squared_distance(queries[a].as_ref(), queries[b].as_ref()));
        }
    }
    stats::quantile(&dists, 0.9)
}

/// Representatives `W` and their statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    representatives: Vec<QueryVector>,
    stats: Vec<ClusterStats>,
}

const CODEBOOK_FORMAT: &str = "querydrift.codebook";
const CODEBOOK_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CodebookDocument {
    format: String,
    version: u32,
    codebook: Codebook,
}

impl Codebook {
    /// Codebook over fixed representatives with empty statistics.
    pub fn from_representatives(representatives: Vec<QueryVector>) -> Result<Self> {
        if let Some(first) = representatives.first() {
            if representatives.iter().any(|w| w.len() != first.len()) {
                return Err(Error::Dimensionality("representatives differ in length".into()));
            }
        }
        let stats = vec![ClusterStats::from_members(&[], std::iter::empty()); representatives.len()];
        Ok(Self { representatives, stats })
    }

    /// Growing quantizer: spawn a representative at `q` when `K = 0` or the
    /// closest squared distance exceeds the vigilance, otherwise pull the
    /// winner by `learn_rate * (q - w)`. Statistics come from a final full
    /// assignment pass; representatives left without members are dropped.
    pub fn fit_online<Q: AsRef<[f64]>>(queries: &[Q], cfg: &QuantizerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut book = Self {
            representatives: Vec::new(),
            stats: Vec::new(),
        };
        for q in queries {
            let q = q.as_ref();
            if let Some(first) = book.representatives.first() {
                if first.len() != q.len() {
                    return Err(Error::Dimensionality(format!(
                        "query of length {} in a stream of length {}",
                        q.len(),
                        first.len()
                    )));
                }
            }
            match book.nearest(q) {
                Some((k, d)) if d <= cfg.vigilance => {
                    let w = book.representatives[k].as_mut_slice();
                    for (wi, qi) in w.iter_mut().zip(q) {
                        *wi += cfg.learn_rate * (qi - *wi);
                    }
                }
                _ => {
                    book.representatives.push(QueryVector::new(q.to_vec()));
                }
            }
        }
        book.stats = vec![ClusterStats::from_members(&[], std::iter::empty()); book.len()];
        book.refresh_stats(queries);
        book.prune_empty();
        Ok(book)
    }

    pub fn len(&self) -> usize {
        self.representatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.representatives.is_empty()
    }

    /// Query-vector length the codebook works in (0 when empty).
    pub fn dim(&self) -> usize {
        self.representatives.first().map_or(0, QueryVector::len)
    }

    pub fn representative(&self, k: usize) -> &QueryVector {
        &self.representatives[k]
    }

    pub fn representatives(&self) -> &[QueryVector] {
        &self.representatives
    }

    pub fn stats(&self, k: usize) -> &ClusterStats {
        &self.stats[k]
    }

    pub fn all_stats(&self) -> &[ClusterStats] {
        &self.stats
    }

    pub fn set_epe(&mut self, k: usize, epe: f64) {
        self.stats[k].epe = epe;
    }

    /// Appends a representative with its statistics and returns its id.
    pub fn push(&mut self, w: QueryVector, stats: ClusterStats) -> Result<usize> {
        if !self.is_empty() && w.len() != self.dim() {
            return Err(Error::Dimensionality(format!(
                "representative of length {} for a codebook of length {}",
                w.len(),
                self.dim()
            )));
        }
        self.representatives.push(w);
        self.stats.push(stats);
        Ok(self.len() - 1)
    }

    fn nearest(&self, q: &[f64]) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (k, w) in self.representatives.iter().enumerate() {
            let d = squared_distance(q, w.as_slice());
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((k, d));
            }
        }
        best
    }

    /// Closest and rival representative; ties go to the lowest id.
    pub fn assign(&self, q: &[f64]) -> Result<Assignment> {
        if self.is_empty() {
            return Err(Error::State("assignment against an empty codebook".into()));
        }
        if q.len() != self.dim() {
            return Err(Error::Dimensionality(format!(
                "query of length {} for a codebook of length {}",
                q.len(),
                self.dim()
            )));
        }
        let mut first = (usize::MAX, f64::INFINITY);
        let mut second = (usize::MAX, f64::INFINITY);
        for (k, w) in self.representatives.iter().enumerate() {
            let d = squared_distance(q, w.as_slice());
            if d < first.1 || first.0 == usize::MAX {
                second = first;
                first = (k, d);
            } else if d < second.1 || second.0 == usize::MAX {
                second = (k, d);
            }
        }
        Ok(Assignment {
            closest: first.0,
            closest_dist: first.1,
            rival: (second.0 != usize::MAX).then_some(second.0),
            rival_dist: second.1,
        })
    }

    /// Recomputes member counts, variance and min distance from a full
    /// assignment pass over `queries`. EPE values are kept.
    pub fn refresh_stats<Q: AsRef<[f64]>>(&mut self, queries: &[Q]) {
        let mut members: Vec<Vec<&[f64]>> = vec![Vec::new(); self.len()];
        for q in queries {
            if let Ok(a) = self.assign(q.as_ref()) {
                members[a.closest].push(q.as_ref());
            }
        }
        for (k, m) in members.into_iter().enumerate() {
            let epe = self.stats[k].epe;
            self.stats[k] = ClusterStats::from_members(self.representatives[k].as_slice(), m);
            self.stats[k].epe = epe;
        }
    }

    fn prune_empty(&mut self) {
        let keep: Vec<bool> = self.stats.iter().map(|s| s.member_count > 0).collect();
        let mut it = keep.iter();
        self.representatives.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.stats.retain(|_| *it.next().unwrap());
    }

    /// Indices of `queries` grouped by closest representative.
    pub fn partition_indices<Q: AsRef<[f64]>>(&self, queries: &[Q]) -> Result<Vec<Vec<usize>>> {
        let mut groups = vec![Vec::new(); self.len()];
        for (i, q) in queries.iter().enumerate() {
            groups[self.assign(q.as_ref())?.closest].push(i);
        }
        Ok(groups)
    }

    /// Splits training pairs into `K` disjoint subsets by closest representative.
    pub fn partition(&self, pairs: &[QueryAnswerPair]) -> Result<Vec<Vec<QueryAnswerPair>>> {
        let mut groups = vec![Vec::new(); self.len()];
        for p in pairs {
            groups[self.assign(p.query.as_slice())?.closest].push(p.clone());
        }
        Ok(groups)
    }

    /// Mean squared distance of each query to its closest representative.
    pub fn quantization_error<Q: AsRef<[f64]>>(&self, queries: &[Q]) -> Result<f64> {
        if queries.is_empty() {
            return Err(Error::Config("quantization error of an empty query set".into()));
        }
        let mut total = 0.0;
        for q in queries {
            total += self.assign(q.as_ref())?.closest_dist;
        }
        Ok(total / queries.len() as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&CodebookDocument {
            format: CODEBOOK_FORMAT.into(),
            version: CODEBOOK_VERSION,
            codebook: self.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: CodebookDocument = serde_json::from_str(s)?;
        if doc.format != CODEBOOK_FORMAT || doc.version != CODEBOOK_VERSION {
            return Err(Error::Parse(format!(
                "unsupported codebook document {} v{}",
                doc.format, doc.version
            )));
        }
        if doc.codebook.representatives.len() != doc.codebook.stats.len() {
            return Err(Error::Parse("representative and stats counts differ".into()));
        }
        Ok(doc.codebook)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qv(v: &[f64]) -> QueryVector {
        QueryVector::new(v.to_vec())
    }

    fn book(ws: &[&[f64]]) -> Codebook {
        Codebook::from_representatives(ws.iter().map(|w| qv(w)).collect()).unwrap()
    }

    #[test]
    fn assign_nearer_prototype() {
        let b = book(&[&[0.0, 0.0], &[10.0, 10.0]]);
        let a = b.assign(&[1.0, 1.0]).unwrap();
        assert_eq!((a.closest, a.rival), (0, Some(1)));
        assert_eq!(a.closest_dist, 2.0);
    }

    #[test]
    fn assign_tie_goes_to_lowest_id() {
        let b = book(&[&[0.0, 0.0], &[2.0, 0.0]]);
        let a = b.assign(&[1.0, 0.0]).unwrap();
        assert_eq!((a.closest, a.rival), (0, Some(1)));
        let b = book(&[&[5.0], &[0.0], &[2.0]]);
        let a = b.assign(&[1.0]).unwrap();
        assert_eq!((a.closest, a.rival), (1, Some(2)));
    }

    #[test]
    fn assign_errors() {
        let empty = Codebook::from_representatives(vec![]).unwrap();
        assert!(matches!(empty.assign(&[1.0]), Err(Error::State(_))));
        let single = book(&[&[0.0]]);
        assert_eq!(single.assign(&[3.0]).unwrap().rival, None);
        assert!(matches!(single.assign(&[1.0, 2.0]), Err(Error::Dimensionality(_))));
    }

    #[test]
    fn fit_two_point_masses() {
        let mut qs = Vec::new();
        for i in 0..50 {
            let jitter = (i % 5) as f64 * 0.01;
            qs.push(vec![0.0 + jitter, 0.0]);
            qs.push(vec![100.0 + jitter, 100.0]);
        }
        // intra-mass squared distances <= 0.0016, inter-mass ~ 20000
        let b = Codebook::fit_online(&qs, &QuantizerConfig::new(1.0, 0.1)).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.all_stats().iter().map(|s| s.member_count).sum::<usize>(), 100);
    }

    #[test]
    fn fit_repeated_query_is_fixed_point() {
        let qs = vec![vec![3.0, -1.0]; 20];
        let b = Codebook::fit_online(&qs, &QuantizerConfig::new(0.5, 0.3)).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.representative(0).as_slice(), &[3.0, -1.0]);
        assert_eq!(b.stats(0).variance, 0.0);
    }

    #[test]
    fn infinite_vigilance_never_spawns() {
        let qs: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64 * 1e3, -(i as f64)]).collect();
        let b = Codebook::fit_online(&qs, &QuantizerConfig::new(f64::INFINITY, 0.2)).unwrap();
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn fit_validates_config() {
        let qs = vec![vec![0.0]];
        assert!(Codebook::fit_online(&qs, &QuantizerConfig::new(0.0, 0.1)).is_err());
        assert!(Codebook::fit_online(&qs, &QuantizerConfig::new(1.0, 1.0)).is_err());
    }

    #[test]
    fn quantization_error_examples() {
        let b = book(&[&[0.0, 0.0]]);
        let err = b.quantization_error(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(err, 1.0);
        let b = book(&[&[1.0, 2.0], &[5.0, 5.0]]);
        assert_eq!(b.quantization_error(&[vec![1.0, 2.0], vec![5.0, 5.0]]).unwrap(), 0.0);
    }

    #[test]
    fn stats_match_definition() {
        let mut b = book(&[&[0.0, 0.0], &[10.0, 0.0]]);
        let qs = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![9.0, 0.0]];
        b.refresh_stats(&qs);
        let s = b.stats(0);
        assert_eq!(s.member_count, 2);
        assert_eq!(s.variance, 2.5);
        assert_eq!(s.min_dist, 1.0);
        assert_eq!(b.stats(1).member_count, 1);
    }

    #[test]
    fn codebook_json_versioned() {
        let mut b = book(&[&[0.0, 1.0], &[2.0, 3.0]]);
        b.set_epe(1, 4.5);
        let json = b.to_json().unwrap();
        assert!(json.contains("\"version\": 1"));
        assert_eq!(Codebook::from_json(&json).unwrap(), b);
        let bumped = json.replace("\"version\": 1", "\"version\": 9");
        assert!(Codebook::from_json(&bumped).is_err());
    }

    #[test]
    fn default_vigilance_is_pairwise_quantile() {
        let qs: Vec<Vec<f64>> = vec![vec![0.0], vec![1.0], vec![3.0]];
        // pairwise squared: 1, 9, 4 -> sorted 1, 4, 9; q0.9 = 4 + 0.8 * 5
        assert!((default_vigilance(&qs, 500, 1) - 8.0).abs() < 1e-12);
    }
}
