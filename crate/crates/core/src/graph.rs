//! k-NN similarity graphs over a batch of embeddings, their combinatorial
//! Laplacian, and the smoothness of class label signals on them.
//!
//! Everything here works on plain values (no tape). The differentiable path
//! used during training lives in [`crate::loss`]; this module is the
//! independent reference it is checked against.

use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor};

/// Symmetric weighted adjacency over `n` vertices together with the k-NN
/// mask it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    n: usize,
    k: usize,
    weights: Tensor,
    knn_mask: Mask,
}

impl SimilarityGraph {
    /// Builds a graph from a precomputed symmetric distance matrix, using the
    /// kernel `exp(−alpha·distance)` on k-NN edges.
    pub fn from_distances(distances: &Tensor, k: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be > 0, got {alpha}")));
        }
        let knn = knn_mask(distances, k)?;
        let n = knn.rows();
        let mut weights = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                if knn.get(i, j) {
                    weights.set(i, j, (-alpha * distances.at(i, j)).exp());
                }
            }
        }
        Ok(SimilarityGraph { n, k, weights, knn_mask: knn })
    }

    /// Builds a graph directly from a symmetric weight matrix; every nonzero
    /// off-diagonal entry becomes an edge. Useful for tests and external graphs.
    pub fn from_weights(weights: Tensor) -> Result<Self> {
        let (n, c) = weights.require_matrix("SimilarityGraph::from_weights")?;
        if n != c {
            return Err(Error::shape("SimilarityGraph::from_weights", "weights must be square"));
        }
        let mut mask = Mask::new(n, n);
        for i in 0..n {
            if weights.at(i, i) != 0.0 {
                return Err(Error::InvalidArgument("graph weights must have a zero diagonal".into()));
            }
            for j in 0..n {
                let w = weights.at(i, j);
                if w < 0.0 || !w.is_finite() || w != weights.at(j, i) {
                    return Err(Error::InvalidArgument(
                        "graph weights must be finite, nonnegative and symmetric".into(),
                    ));
                }
                mask.set(i, j, w > 0.0);
            }
        }
        let min_degree = (0..n).map(|i| (0..n).filter(|&j| mask.get(i, j)).count()).min().unwrap_or(0);
        Ok(SimilarityGraph { n, k: min_degree, weights, knn_mask: mask })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn knn_mask(&self) -> &Mask {
        &self.knn_mask
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights.at(i, j)
    }
}

/// Euclidean distances between the rows of `embeddings`.
pub fn euclidean_distances(embeddings: &Tensor) -> Tensor {
    let n = embeddings.rows();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            let sq: f64 = embeddings.row(i).iter().zip(embeddings.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            let d = sq.sqrt();
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    out
}

/// Selects the `k` nearest other vertices of each vertex (ties go to the lower
/// index) and symmetrizes the selection by union.
pub fn knn_mask(distances: &Tensor, k: usize) -> Result<Mask> {
    let (n, c) = distances.require_matrix("knn_mask")?;
    if n != c {
        return Err(Error::shape("knn_mask", format!("distance matrix is {}x{}", n, c)));
    }
    if k < 1 || k + 1 > n {
        return Err(Error::KOutOfRange { k, max: n.saturating_sub(1) });
    }
    let mut mask = Mask::new(n, n);
    let mut order: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        let row = distances.row(i);
        // stable sort keeps ascending index order among equal distances
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        for &j in &order[..k] {
            mask.set(i, j, true);
            mask.set(j, i, true);
        }
    }
    Ok(mask)
}

/// k-NN graph of `embeddings` with kernel weights `exp(−alpha·‖x_i − x_j‖)`.
pub fn build_similarity_graph(embeddings: &Tensor, k: usize, alpha: f64) -> Result<SimilarityGraph> {
    embeddings.require_matrix("build_similarity_graph")?;
    SimilarityGraph::from_distances(&euclidean_distances(embeddings), k, alpha)
}

/// Combinatorial Laplacian `L = D − W`.
pub fn laplacian(g: &SimilarityGraph) -> Tensor {
    let n = g.n;
    let mut l = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let mut degree = 0.0;
        for j in 0..n {
            let w = g.weight(i, j);
            degree += w;
            if i != j {
                l.set(i, j, -w);
            }
        }
        l.set(i, i, degree);
    }
    l
}

/// Binary indicator of one class over the vertices of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSignal {
    pub class_id: usize,
    pub values: Vec<f64>,
}

/// One indicator signal per class; together they partition the vertices.
pub fn label_signals(labels: &[usize], num_classes: usize) -> Result<Vec<LabelSignal>> {
    if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    Ok((0..num_classes)
        .map(|c| LabelSignal {
            class_id: c,
            values: labels.iter().map(|&l| if l == c { 1.0 } else { 0.0 }).collect(),
        })
        .collect())
}

/// Quadratic form `sᵀ L s` of a signal on the graph.
pub fn smoothness(g: &SimilarityGraph, s: &LabelSignal) -> Result<f64> {
    quadratic_form(&laplacian(g), &s.values)
}

/// `xᵀ M x` for a square matrix `M`.
pub fn quadratic_form(m: &Tensor, x: &[f64]) -> Result<f64> {
    let n = m.rows();
    if m.cols() != n || x.len() != n {
        return Err(Error::shape(
            "quadratic_form",
            format!("{}x{} matrix vs signal of length {}", m.rows(), m.cols(), x.len()),
        ));
    }
    let mut total = 0.0;
    for i in 0..n {
        if x[i] == 0.0 {
            continue;
        }
        let row: f64 = m.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
        total += x[i] * row;
    }
    Ok(total)
}

/// `Σ_c sᵀ_c L s_c` over all label signals of a batch.
pub fn total_label_smoothness(g: &SimilarityGraph, labels: &[usize], num_classes: usize) -> Result<f64> {
    if labels.len() != g.n {
        return Err(Error::shape("total_label_smoothness", "one label per vertex required"));
    }
    let l = laplacian(g);
    label_signals(labels, num_classes)?
        .iter()
        .map(|s| quadratic_form(&l, &s.values))
        .sum()
}
