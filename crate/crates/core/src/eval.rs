//! k-NN classification over embeddings, accuracy and corruption-robustness
//! scores.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{corrupt, Corruption, Dataset, SEVERITIES};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

pub const ROBUSTNESS_SCHEMA: &str = "smoothloss.robustness/1";

/// Reference embeddings with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    embeddings: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl EmbeddingIndex {
    pub fn new(embeddings: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let (m, _) = embeddings.require_matrix("EmbeddingIndex")?;
        if m == 0 {
            return Err(Error::InvalidArgument("embedding index needs at least one reference".into()));
        }
        if m != labels.len() {
            return Err(Error::shape("EmbeddingIndex", format!("{m} rows vs {} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        if !embeddings.all_finite() {
            return Err(Error::NonFinite { op: "EmbeddingIndex" });
        }
        Ok(EmbeddingIndex { embeddings, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Keeps the first `cap` references.
    pub fn truncated(&self, cap: usize) -> EmbeddingIndex {
        if cap >= self.len() {
            return self.clone();
        }
        let keep: Vec<usize> = (0..cap.max(1)).collect();
        EmbeddingIndex {
            embeddings: self.embeddings.select_rows(&keep),
            labels: self.labels[..keep.len()].to_vec(),
            num_classes: self.num_classes,
        }
    }
}

/// Majority vote among the `k` nearest references (Euclidean).
///
/// Equal distances go to the lower reference index; tied votes go to the
/// smallest class id.
pub fn knn_predict(index: &EmbeddingIndex, queries: &Tensor, k: usize) -> Result<Vec<usize>> {
    let (_, d) = queries.require_matrix("knn_predict")?;
    if d != index.dim() {
        return Err(Error::shape("knn_predict", format!("queries have {d} columns, index {}", index.dim())));
    }
    if k == 0 || k > index.len() {
        return Err(Error::KOutOfRange { k, max: index.len() });
    }
    let m = index.len();
    let refs = index.embeddings.data();
    Ok((0..queries.rows())
        .into_par_iter()
        .map(|q| {
            let query = queries.row(q);
            // squared distances order the same way as distances
            let mut order: Vec<(f64, usize)> = (0..m)
                .map(|r| {
                    let row = &refs[r * d..(r + 1) * d];
                    (row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum(), r)
                })
                .collect();
            let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < m {
                order.select_nth_unstable_by(k - 1, by_distance);
            }
            let mut votes = vec![0usize; index.num_classes];
            for &(_, r) in &order[..k] {
                votes[index.labels[r]] += 1;
            }
            argmax_first(&votes)
        })
        .collect())
}

fn argmax_first(votes: &[usize]) -> usize {
    let mut best = 0;
    for (c, &v) in votes.iter().enumerate() {
        if v > votes[best] {
            best = c;
        }
    }
    best
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("accuracy", format!("{} predictions vs {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty prediction set".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Row-wise argmax of a logit matrix; ties go to the smallest class id.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let (n, c) = logits.require_matrix("argmax_rows")?;
    Ok((0..n)
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Test error per (corruption, severity) cell.
pub type ErrorGrid = BTreeMap<(Corruption, u8), f64>;

fn per_corruption(grid: &ErrorGrid, offset: f64) -> BTreeMap<Corruption, f64> {
    let mut sums = BTreeMap::new();
    for (&(kind, _), &e) in grid {
        *sums.entry(kind).or_insert(0.0) += e - offset;
    }
    sums
}

fn ratio_mean(method: &BTreeMap<Corruption, f64>, baseline: &BTreeMap<Corruption, f64>, what: &str) -> Result<f64> {
    let mut total = 0.0;
    for (kind, &b) in baseline {
        if b == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "baseline {what} error sum for {} is zero",
                kind.name()
            )));
        }
        total += method[kind] / b;
    }
    Ok(100.0 * total / baseline.len() as f64)
}

fn check_grids(method: &ErrorGrid, baseline: &ErrorGrid, method_clean: f64, baseline_clean: f64) -> Result<()> {
    if method.is_empty() {
        return Err(Error::InvalidArgument("empty corruption grid".into()));
    }
    if method.len() != baseline.len() || method.keys().zip(baseline.keys()).any(|(a, b)| a != b) {
        return Err(Error::InvalidArgument("method and baseline corruption grids differ".into()));
    }
    let errors = method.values().chain(baseline.values()).chain([&method_clean, &baseline_clean]);
    if let Some(e) = errors.into_iter().find(|e| !(0.0..=1.0).contains(*e)) {
        return Err(Error::InvalidArgument(format!("error rate {e} outside [0, 1]")));
    }
    Ok(())
}

/// `100 · mean_c [Σ_s E_method(c, s) / Σ_s E_baseline(c, s)]`.
pub fn mce_absolute(method: &ErrorGrid, baseline: &ErrorGrid) -> Result<f64> {
    check_grids(method, baseline, 0.0, 0.0)?;
    ratio_mean(&per_corruption(method, 0.0), &per_corruption(baseline, 0.0), "corruption")
}

/// Like [`mce_absolute`] with every error first reduced by that model's
/// clean error. Negative when corruption lowers the baseline's summed error
/// for some type but raises the method's.
pub fn mce_relative(method: &ErrorGrid, baseline: &ErrorGrid, method_clean: f64, baseline_clean: f64) -> Result<f64> {
    check_grids(method, baseline, method_clean, baseline_clean)?;
    ratio_mean(
        &per_corruption(method, method_clean),
        &per_corruption(baseline, baseline_clean),
        "relative corruption",
    )
}

/// Returns `(mce, relative_mce)`, both in percent. A baseline compared with
/// itself scores exactly 100 on both.
pub fn mce(method: &ErrorGrid, baseline: &ErrorGrid, method_clean: f64, baseline_clean: f64) -> Result<(f64, f64)> {
    Ok((mce_absolute(method, baseline)?, mce_relative(method, baseline, method_clean, baseline_clean)?))
}

/// One trained model plus the decision rule used to classify with it.
#[derive(Debug, Clone)]
pub enum Classifier {
    /// k-NN vote over reference embeddings.
    Knn { params: ModelParams, index: EmbeddingIndex, k: usize },
    /// Class with the largest output; for logit models.
    Argmax { params: ModelParams },
}

impl Classifier {
    pub fn predict(&self, inputs: &Tensor) -> Result<Vec<usize>> {
        match self {
            Classifier::Knn { params, index, k } => knn_predict(index, &params.predict(inputs)?, *k),
            Classifier::Argmax { params } => argmax_rows(&params.predict(inputs)?),
        }
    }

    pub fn error(&self, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
        Ok(1.0 - accuracy(&self.predict(inputs)?, labels)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub corruption: Corruption,
    pub severity: u8,
    pub method_error: f64,
    pub baseline_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub schema: String,
    pub seed: u64,
    pub method_clean_error: f64,
    pub baseline_clean_error: f64,
    pub cells: Vec<CellRecord>,
    pub mce: f64,
    /// Absent when the baseline's summed corrupted error equals its clean
    /// error for some corruption type.
    pub relative_mce: Option<f64>,
}

impl RobustnessReport {
    pub fn method_grid(&self) -> ErrorGrid {
        self.cells.iter().map(|c| ((c.corruption, c.severity), c.method_error)).collect()
    }

    pub fn baseline_grid(&self) -> ErrorGrid {
        self.cells.iter().map(|c| ((c.corruption, c.severity), c.baseline_error)).collect()
    }
}

/// Evaluates both classifiers on every corruption and severity of `test`.
/// Both see the same corrupted inputs.
pub fn robustness_report(method: &Classifier, baseline: &Classifier, test: &Dataset, seed: u64) -> Result<RobustnessReport> {
    let method_clean_error = method.error(&test.inputs, &test.labels)?;
    let baseline_clean_error = baseline.error(&test.inputs, &test.labels)?;
    let mut cells = Vec::new();
    for kind in Corruption::ALL {
        for severity in SEVERITIES {
            let x = corrupt(&test.inputs, kind, severity, seed)?;
            cells.push(CellRecord {
                corruption: kind,
                severity,
                method_error: method.error(&x, &test.labels)?,
                baseline_error: baseline.error(&x, &test.labels)?,
            });
        }
    }
    let mut report = RobustnessReport {
        schema: ROBUSTNESS_SCHEMA.into(),
        seed,
        method_clean_error,
        baseline_clean_error,
        cells,
        mce: 0.0,
        relative_mce: None,
    };
    let (method_grid, baseline_grid) = (report.method_grid(), report.baseline_grid());
    report.mce = mce_absolute(&method_grid, &baseline_grid)?;
    report.relative_mce = mce_relative(&method_grid, &baseline_grid, method_clean_error, baseline_clean_error).ok();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_matrix(rng: &mut rng::Rng, n: usize, d: usize) -> Tensor {
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn exact_match_with_one_neighbor() {
        let idx = EmbeddingIndex::new(Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![5.0, 5.0]]).unwrap(), vec![2, 0, 1], 3)
            .unwrap();
        let q = Tensor::from_rows(&[vec![1.0, 1.0], vec![5.0, 5.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(knn_predict(&idx, &q, 1).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn full_k_is_global_majority() {
        let mut rng = rng::stream(1, 0);
        let labels = vec![1, 2, 2, 0, 1, 2, 0];
        let idx = EmbeddingIndex::new(random_matrix(&mut rng, 7, 3), labels, 3).unwrap();
        let q = random_matrix(&mut rng, 10, 3);
        assert_eq!(knn_predict(&idx, &q, 7).unwrap(), vec![2; 10]);
    }

    #[test]
    fn tie_breaks() {
        // both references at the same distance: the lower index wins
        let idx = EmbeddingIndex::new(Tensor::from_rows(&[vec![1.0], vec![-1.0]]).unwrap(), vec![1, 0], 2).unwrap();
        assert_eq!(knn_predict(&idx, &Tensor::from_rows(&[vec![0.0]]).unwrap(), 1).unwrap(), vec![1]);
        // one vote each: the smaller class wins
        assert_eq!(knn_predict(&idx, &Tensor::from_rows(&[vec![0.0]]).unwrap(), 2).unwrap(), vec![0]);
    }

    fn sort_oracle(refs: &Tensor, labels: &[usize], c: usize, q: &[f64], k: usize) -> usize {
        let mut all: Vec<(f64, usize)> = (0..refs.rows())
            .map(|r| (refs.row(r).iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(), r))
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut votes = vec![0; c];
        for &(_, r) in &all[..k] {
            votes[labels[r]] += 1;
        }
        let top = *votes.iter().max().unwrap();
        votes.iter().position(|&v| v == top).unwrap()
    }

    #[test]
    fn matches_full_sort_oracle() {
        for seed in 0..10 {
            let mut rng = rng::stream(seed, 0);
            let refs = random_matrix(&mut rng, 50, 4);
            let labels: Vec<usize> = (0..50).map(|_| rng.random_range(0..4)).collect();
            let q = random_matrix(&mut rng, 20, 4);
            let idx = EmbeddingIndex::new(refs.clone(), labels.clone(), 4).unwrap();
            let got = knn_predict(&idx, &q, 5).unwrap();
            for i in 0..20 {
                assert_eq!(got[i], sort_oracle(&refs, &labels, 4, q.row(i), 5));
            }
        }
    }

    #[test]
    fn knn_errors() {
        let idx = EmbeddingIndex::new(Tensor::zeros(&[3, 2]), vec![0, 1, 0], 2).unwrap();
        assert!(matches!(knn_predict(&idx, &Tensor::zeros(&[1, 2]), 0), Err(Error::KOutOfRange { .. })));
        assert!(matches!(knn_predict(&idx, &Tensor::zeros(&[1, 2]), 4), Err(Error::KOutOfRange { .. })));
        assert!(knn_predict(&idx, &Tensor::zeros(&[1, 3]), 1).is_err());
        assert!(EmbeddingIndex::new(Tensor::zeros(&[0, 2]), vec![], 2).is_err());
        assert!(EmbeddingIndex::new(Tensor::zeros(&[1, 2]), vec![2], 2).is_err());
    }

    #[test]
    fn accuracy_cases() {
        let truth: Vec<usize> = (0..10).map(|i| i % 3).collect();
        assert_eq!(accuracy(&truth, &truth).unwrap(), 1.0);
        let wrong: Vec<usize> = truth.iter().map(|t| (t + 1) % 3).collect();
        assert_eq!(accuracy(&wrong, &truth).unwrap(), 0.0);
        let half: Vec<usize> = (0..10).map(|i| if i < 5 { truth[i] } else { wrong[i] }).collect();
        assert_eq!(accuracy(&half, &truth).unwrap(), 0.5);
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    fn grid(values: impl Fn(usize, u8) -> f64) -> ErrorGrid {
        let mut g = ErrorGrid::new();
        for (i, kind) in Corruption::ALL.into_iter().enumerate() {
            for s in SEVERITIES {
                g.insert((kind, s), values(i, s));
            }
        }
        g
    }

    #[test]
    fn self_comparison_scores_100() {
        let g = grid(|i, s| 0.05 * s as f64 + 0.01 * i as f64 + 0.1);
        assert_eq!(mce(&g, &g, 0.1, 0.1).unwrap(), (100.0, 100.0));
    }

    #[test]
    fn half_errors_score_50() {
        let b = grid(|i, s| 0.1 * s as f64 / (1.0 + i as f64));
        let m: ErrorGrid = b.iter().map(|(&k, &v)| (k, v / 2.0)).collect();
        let (score, rel) = mce(&m, &b, 0.0, 0.0).unwrap();
        assert!((score - 50.0).abs() < 1e-12);
        assert!((rel - 50.0).abs() < 1e-12);
    }

    #[test]
    fn mce_grid_errors() {
        let g = grid(|_, s| 0.1 * s as f64);
        let mut short = g.clone();
        short.pop_last();
        assert!(mce(&short, &g, 0.0, 0.0).is_err());
        let zero = grid(|_, _| 0.0);
        assert!(mce(&g, &zero, 0.0, 0.0).is_err());
        let bad = grid(|_, _| 1.5);
        assert!(mce(&bad, &g, 0.0, 0.0).is_err());
        // corrupted error equal to the clean error everywhere
        let flat = grid(|_, _| 0.25);
        assert!(mce_absolute(&flat, &flat).is_ok());
        assert!(mce_relative(&flat, &flat, 0.25, 0.25).is_err());
        assert_eq!(mce_relative(&g, &g, 0.5, 0.5).unwrap(), 100.0);
    }

    #[test]
    fn argmax_prefers_first_maximum() {
        let logits = Tensor::from_rows(&[vec![0.0, 2.0, 2.0], vec![3.0, -1.0, 0.0]]).unwrap();
        assert_eq!(argmax_rows(&logits).unwrap(), vec![1, 0]);
    }
}
