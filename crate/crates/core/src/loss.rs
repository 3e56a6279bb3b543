//! Training objectives recorded on a [`Tape`].
//!
//! The graph smoothness loss sums, over every ordered pair of k-NN neighbors
//! carrying different labels, the kernel `exp(−alpha·‖f(x_μ) − f(x_ν)‖)`.
//! This equals `Σ_c sᵀ_c L s_c` on the batch's similarity graph. The neighbor
//! selection is piecewise constant, so the mask is computed from the forward
//! values and held fixed; gradients flow only through the distances.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph;
use crate::tensor::Mask;

/// Smoothing term added to squared distances before the square root.
pub const DISTANCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct LossValue {
    /// Scalar loss on the tape.
    pub value: Var,
    /// Ordered cross-class pairs that contributed (0 for cross-entropy).
    pub cross_edges: usize,
    /// Mean kernel weight over those pairs (0 when there are none).
    pub mean_cross_weight: f64,
}

/// Graph smoothness loss of a batch of embeddings.
///
/// A batch with a single class has no cross-class edges and yields exactly 0.
pub fn graph_smoothness_loss(
    tape: &Tape,
    embeddings: Var,
    labels: &[usize],
    k: usize,
    alpha: f64,
) -> Result<LossValue> {
    let shape = tape.shape(embeddings);
    if shape.len() != 2 {
        return Err(Error::shape("graph_smoothness_loss", format!("embeddings shape {:?}", shape)));
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::InvalidArgument(format!("graph smoothness loss needs n >= 2, got {n}")));
    }
    if labels.len() != n {
        return Err(Error::shape("graph_smoothness_loss", format!("{} rows vs {} labels", n, labels.len())));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be > 0, got {alpha}")));
    }

    let distances = tape.pairwise_euclidean(embeddings, DISTANCE_EPS)?;
    let knn = graph::knn_mask(&tape.value(distances), k)?;
    let active = knn.and(&Mask::cross_class(labels))?;
    let kernel = tape.exp_neg_scale(distances, alpha)?;
    let value = tape.masked_sum(kernel, &active)?;

    let cross_edges = active.count();
    let mean_cross_weight = if cross_edges == 0 { 0.0 } else { tape.item(value) / cross_edges as f64 };
    Ok(LossValue { value, cross_edges, mean_cross_weight })
}

/// Lower bound of the graph smoothness loss for embeddings on the unit
/// sphere, where no two points are farther apart than 2 (plus the distance
/// smoothing term).
pub fn unit_sphere_floor(cross_edges: usize, alpha: f64) -> f64 {
    cross_edges as f64 * (-alpha * (4.0 + DISTANCE_EPS).sqrt()).exp()
}

/// Mean softmax cross-entropy of logits against integer labels.
pub fn cross_entropy_loss(tape: &Tape, logits: Var, labels: &[usize]) -> Result<LossValue> {
    let value = tape.softmax_cross_entropy(logits, labels)?;
    Ok(LossValue { value, cross_edges: 0, mean_cross_weight: 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn loss_of(points: &Tensor, labels: &[usize], k: usize, alpha: f64) -> f64 {
        let tape = Tape::new();
        let x = tape.constant(points.clone());
        let l = graph_smoothness_loss(&tape, x, labels, k, alpha).unwrap();
        tape.item(l.value)
    }

    #[test]
    fn single_class_batch_is_zero_with_zero_gradient() {
        let pts = random_points(6, 3, 1);
        let tape = Tape::new();
        let x = tape.leaf(pts);
        let l = graph_smoothness_loss(&tape, x, &[2; 6], 5, 2.0).unwrap();
        assert_eq!(tape.item(l.value), 0.0);
        assert_eq!(l.cross_edges, 0);
        tape.backward(l.value).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn two_vertices_count_both_orders() {
        let pts = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let v = loss_of(&pts, &[0, 1], 1, 2.0);
        assert!((v - 2.0 * (-2.0f64).exp()).abs() < 1e-10);
        assert!((v - 0.270671).abs() < 1e-6);
    }

    #[test]
    fn equals_graph_module_sum_of_quadratic_forms() {
        let pts = random_points(16, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels: Vec<usize> = (0..16).map(|_| rng.random_range(0..3)).collect();
        for k in [1, 4, 15] {
            let v = loss_of(&pts, &labels, k, 1.3);
            let g = graph::build_similarity_graph(&pts, k, 1.3).unwrap();
            let oracle = graph::total_label_smoothness(&g, &labels, 3).unwrap();
            assert!((v - oracle).abs() <= 1e-10 * oracle.abs().max(1.0), "k={k}: {v} vs {oracle}");
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let tape = Tape::new();
        let one = tape.constant(random_points(1, 2, 4));
        assert!(graph_smoothness_loss(&tape, one, &[0], 1, 2.0).is_err());
        let x = tape.constant(random_points(4, 2, 5));
        assert!(matches!(graph_smoothness_loss(&tape, x, &[0, 1, 0, 1], 0, 2.0), Err(Error::KOutOfRange { .. })));
        assert!(matches!(graph_smoothness_loss(&tape, x, &[0, 1, 0, 1], 4, 2.0), Err(Error::KOutOfRange { .. })));
        assert!(graph_smoothness_loss(&tape, x, &[0, 1, 0, 1], 2, 0.0).is_err());
    }

    #[test]
    fn relabeling_leaves_loss_unchanged() {
        let pts = random_points(12, 3, 6);
        let labels: Vec<usize> = (0..12).map(|i| i % 4).collect();
        let perm = [2, 0, 3, 1];
        let relabeled: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        assert_eq!(loss_of(&pts, &labels, 5, 2.0), loss_of(&pts, &relabeled, 5, 2.0));
    }

    #[test]
    fn larger_alpha_gives_smaller_loss() {
        let pts = random_points(10, 3, 7);
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let mut prev = f64::INFINITY;
        for alpha in [0.1, 0.5, 1.0, 2.0, 10.0] {
            let v = loss_of(&pts, &labels, 9, alpha);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn cross_entropy_uniform_and_gradient() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[4, 10]));
        let labels = [0, 3, 9, 5];
        let l = cross_entropy_loss(&tape, logits, &labels).unwrap();
        assert!((tape.item(l.value) - 10f64.ln()).abs() < 1e-12);
        assert!((tape.item(l.value) - 2.302585).abs() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let labels = [1, 0, 3];
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let l = cross_entropy_loss(&tape, v, &labels).unwrap();
        tape.backward(l.value).unwrap();
        let g = tape.grad(v).unwrap();
        for i in 0..3 {
            let row = x.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for j in 0..4 {
                let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                let expected = (row[j].exp() / z - onehot) / 3.0;
                assert!((g.at(i, j) - expected).abs() < 1e-12);
            }
        }

        let big = tape.constant(Tensor::from_rows(&[vec![0.0, 800.0]]).unwrap());
        assert!(tape.item(cross_entropy_loss(&tape, big, &[1]).unwrap().value) < 1e-12);
        assert!(cross_entropy_loss(&tape, big, &[2]).is_err());
    }
}
