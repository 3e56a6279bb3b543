//! Define-by-run reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to its variables in execution
//! order. Inputs are always recorded before the operations that consume them,
//! so a single reverse sweep over the record computes all gradients.
//!
//! Only the operations needed by the embedding network and the two training
//! objectives are provided. Each forward operation validates shapes and
//! rejects non-finite results.
//!
//! ```
//! use smoothloss::autodiff::Tape;
//! use smoothloss::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
//! let y = tape.add(x, x).unwrap();
//! let s = tape.sum(y).unwrap();
//! tape.backward(s).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
//! ```

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, Mask, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sum(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Relu(Var),
    L2NormalizeRows { input: Var, norms: Vec<f64>, eps: f64 },
    PairwiseEuclidean(Var),
    ExpNegScale { input: Var, alpha: f64 },
    MaskedSum { input: Var, mask: Mask },
    WeightedSum { input: Var, weights: Vec<f64> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    BatchNormTrain { input: Var, gamma: Var, beta: Var, normalized: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { input: Var, gamma: Var, beta: Var, normalized: Vec<f64>, inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Batch statistics observed by a training-mode batch-norm operation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (divide-by-n) variance used for normalization.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Ordered record of operations. Confined to one thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a trainable input whose gradient will be populated by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.id].value.item()
    }

    /// Gradient accumulated by the last call to [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad, grad: None });
        Var { id: nodes.len() - 1 }
    }

    fn requires(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.id].requires_grad)
    }

    fn record(&self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = self.requires(inputs);
        Ok(self.push(value, op, requires_grad))
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.id].value, &nodes[b.id].value);
            if x.shape() != y.shape() {
                return Err(Error::shape("add", format!("{:?} vs {:?}", x.shape(), y.shape())));
            }
            let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        self.record("add", value, Op::Add(a, b), &[a, b])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let total = self.nodes.borrow()[a.id].value.data().iter().sum();
        self.record("sum", Tensor::scalar(total), Op::Sum(a), &[a])
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.id].value, &nodes[b.id].value);
            let (m, k) = x.require_matrix("matmul")?;
            let (k2, n) = y.require_matrix("matmul")?;
            if k != k2 {
                return Err(Error::shape("matmul", format!("{}x{} times {}x{}", m, k, k2, n)));
            }
            Tensor::matrix(m, n, matmul_raw(x.data(), y.data(), m, k, n))?
        };
        self.record("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_row_bias(&self, a: Var, bias: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, b) = (&nodes[a.id].value, &nodes[bias.id].value);
            let (m, n) = x.require_matrix("add_row_bias")?;
            if b.len() != n {
                return Err(Error::shape(
                    "add_row_bias",
                    format!("matrix width {} vs bias length {}", n, b.len()),
                ));
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(n) {
                for (v, bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
            Tensor::matrix(m, n, data)?
        };
        self.record("add_row_bias", value, Op::AddRowBias(a, bias), &[a, bias])
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        self.record("relu", value, Op::Relu(a), &[a])
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize_rows(&self, a: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("l2_normalize_rows eps must be > 0, got {eps}")));
        }
        let (value, norms) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            let (m, d) = x.require_matrix("l2_normalize_rows")?;
            let mut data = x.data().to_vec();
            let mut norms = Vec::with_capacity(m);
            for row in data.chunks_mut(d.max(1)) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let denom = norm.max(eps);
                row.iter_mut().for_each(|v| *v /= denom);
                norms.push(norm);
            }
            (Tensor::matrix(m, d, data)?, norms)
        };
        self.record("l2_normalize_rows", value, Op::L2NormalizeRows { input: a, norms, eps }, &[a])
    }

    /// `D[i,j] = sqrt(‖a_i − a_j‖² + eps)` over the rows of `a`.
    pub fn pairwise_euclidean(&self, a: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("pairwise_euclidean eps must be > 0, got {eps}")));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            let (m, _) = x.require_matrix("pairwise_euclidean")?;
            let mut data = vec![0.0; m * m];
            for i in 0..m {
                data[i * m + i] = eps.sqrt();
                for j in (i + 1)..m {
                    let sq: f64 = x.row(i).iter().zip(x.row(j)).map(|(p, q)| (p - q) * (p - q)).sum();
                    let dist = (sq + eps).sqrt();
                    data[i * m + j] = dist;
                    data[j * m + i] = dist;
                }
            }
            Tensor::matrix(m, m, data)?
        };
        self.record("pairwise_euclidean", value, Op::PairwiseEuclidean(a), &[a])
    }

    /// Elementwise `exp(−alpha·x)`.
    pub fn exp_neg_scale(&self, a: Var, alpha: f64) -> Result<Var> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be > 0, got {alpha}")));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            let data = x.data().iter().map(|&v| (-alpha * v).exp()).collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        self.record("exp_neg_scale", value, Op::ExpNegScale { input: a, alpha }, &[a])
    }

    /// Sum of the entries selected by `mask`.
    pub fn masked_sum(&self, a: Var, mask: &Mask) -> Result<Var> {
        let total = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            let (r, c) = x.require_matrix("masked_sum")?;
            if (r, c) != (mask.rows(), mask.cols()) {
                return Err(Error::shape(
                    "masked_sum",
                    format!("{}x{} values vs {}x{} mask", r, c, mask.rows(), mask.cols()),
                ));
            }
            x.data().iter().zip(mask.bits()).filter(|(_, &b)| b).map(|(v, _)| v).sum()
        };
        let op = Op::MaskedSum { input: a, mask: mask.clone() };
        self.record("masked_sum", Tensor::scalar(total), op, &[a])
    }

    /// `Σ weights[i]·a[i]` with constant weights.
    pub fn weighted_sum(&self, a: Var, weights: &[f64]) -> Result<Var> {
        let total = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            if x.len() != weights.len() {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("{} values vs {} weights", x.len(), weights.len()),
                ));
            }
            x.data().iter().zip(weights).map(|(v, w)| v * w).sum()
        };
        let op = Op::WeightedSum { input: a, weights: weights.to_vec() };
        self.record("weighted_sum", Tensor::scalar(total), op, &[a])
    }

    /// Mean over rows of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[logits.id].value;
            let (m, c) = x.require_matrix("softmax_cross_entropy")?;
            if labels.len() != m {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    format!("{} rows vs {} labels", m, labels.len()),
                ));
            }
            if m == 0 {
                return Err(Error::InvalidArgument("softmax_cross_entropy on an empty batch".into()));
            }
            let mut probs = vec![0.0; m * c];
            let mut loss = 0.0;
            for (i, &label) in labels.iter().enumerate() {
                if label >= c {
                    return Err(Error::LabelOutOfRange { label, num_classes: c });
                }
                let row = x.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let log_z = max + sum_exp.ln();
                for (j, v) in row.iter().enumerate() {
                    probs[i * c + j] = (v - log_z).exp();
                }
                loss += log_z - row[label];
            }
            (loss / m as f64, probs)
        };
        let op = Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs };
        self.record("softmax_cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Batch normalization with statistics of the current batch, followed by a
    /// per-column affine map `gamma·x̂ + beta`.
    pub fn batch_norm_train(&self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (value, normalized, inv_std, stats) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            let (m, d) = x.require_matrix("batch_norm_train")?;
            check_affine(&nodes[gamma.id].value, &nodes[beta.id].value, d, "batch_norm_train")?;
            if m < 2 {
                return Err(Error::InvalidArgument("batch_norm_train needs at least 2 rows".into()));
            }
            let mut mean = vec![0.0; d];
            for i in 0..m {
                for (j, mu) in mean.iter_mut().enumerate() {
                    *mu += x.at(i, j);
                }
            }
            mean.iter_mut().for_each(|mu| *mu /= m as f64);
            let mut var = vec![0.0; d];
            for i in 0..m {
                for j in 0..d {
                    let c = x.at(i, j) - mean[j];
                    var[j] += c * c;
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let (value, normalized) =
                affine_normalize(x, &mean, &inv_std, &nodes[gamma.id].value, &nodes[beta.id].value)?;
            (value, normalized, inv_std, BatchStats { mean, var, count: m })
        };
        let op = Op::BatchNormTrain { input: a, gamma, beta, normalized, inv_std };
        let out = self.record("batch_norm_train", value, op, &[a, gamma, beta])?;
        Ok((out, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &self,
        a: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (value, normalized, inv_std) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.id].value;
            let (_, d) = x.require_matrix("batch_norm_eval")?;
            check_affine(&nodes[gamma.id].value, &nodes[beta.id].value, d, "batch_norm_eval")?;
            if mean.len() != d || var.len() != d {
                return Err(Error::shape("batch_norm_eval", "running statistics width mismatch"));
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let (value, normalized) =
                affine_normalize(x, mean, &inv_std, &nodes[gamma.id].value, &nodes[beta.id].value)?;
            (value, normalized, inv_std)
        };
        let op = Op::BatchNormEval { input: a, gamma, beta, normalized, inv_std };
        self.record("batch_norm_eval", value, op, &[a, gamma, beta])
    }

    /// Propagates `∂root/∂node` to every node that depends on a leaf.
    ///
    /// Gradients from a previous call are discarded first. Nodes that are
    /// reached along several paths accumulate the sum of the path gradients.
    pub fn backward(&self, root: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if !nodes[root.id].value.is_scalar() {
            return Err(Error::NonScalarRoot { shape: nodes[root.id].value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }

        for (node, g) in nodes.iter_mut().zip(grads.into_iter().chain(std::iter::repeat(None))) {
            node.grad = if node.requires_grad { g } else { None };
        }
        Ok(())
    }
}

fn check_affine(gamma: &Tensor, beta: &Tensor, d: usize, op: &'static str) -> Result<()> {
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape(
            op,
            format!("width {} vs gamma {} / beta {}", d, gamma.len(), beta.len()),
        ));
    }
    Ok(())
}

fn affine_normalize(
    x: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    let (m, d) = (x.rows(), x.cols());
    let mut normalized = vec![0.0; m * d];
    let mut out = vec![0.0; m * d];
    for i in 0..m {
        for j in 0..d {
            let h = (x.at(i, j) - mean[j]) * inv_std[j];
            normalized[i * d + j] = h;
            out[i * d + j] = gamma.data()[j] * h + beta.data()[j];
        }
    }
    Ok((Tensor::matrix(m, d, out)?, normalized))
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.id].value;
    let needs = |v: Var| nodes[v.id].requires_grad;
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if needs(v) {
                    accumulate(grads, v, g.to_vec());
                }
            }
        }
        Op::Sum(a) => {
            if needs(*a) {
                accumulate(grads, *a, vec![g[0]; val(*a).len()]);
            }
        }
        Op::MatMul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let (m, k, n) = (x.rows(), x.cols(), y.cols());
            if needs(*a) {
                // g · bᵀ
                let bt = y.transpose();
                accumulate(grads, *a, matmul_raw(g, bt.data(), m, n, k));
            }
            if needs(*b) {
                // aᵀ · g
                let at = x.transpose();
                accumulate(grads, *b, matmul_raw(at.data(), g, k, m, n));
            }
        }
        Op::AddRowBias(a, bias) => {
            if needs(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if needs(*bias) {
                let n = val(*bias).len();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    for (s, r) in gb.iter_mut().zip(row) {
                        *s += r;
                    }
                }
                accumulate(grads, *bias, gb);
            }
        }
        Op::Relu(a) => {
            if needs(*a) {
                let gx = val(*a).data().iter().zip(g).map(|(&x, &gi)| if x > 0.0 { gi } else { 0.0 }).collect();
                accumulate(grads, *a, gx);
            }
        }
        Op::L2NormalizeRows { input, norms, eps } => {
            if needs(*input) {
                let y = &node.value;
                let d = y.cols();
                let mut gx = vec![0.0; y.len()];
                for (i, &norm) in norms.iter().enumerate() {
                    let yr = y.row(i);
                    let gr = &g[i * d..(i + 1) * d];
                    let out = &mut gx[i * d..(i + 1) * d];
                    if norm >= *eps {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            out[j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    } else {
                        for j in 0..d {
                            out[j] = gr[j] / eps;
                        }
                    }
                }
                accumulate(grads, *input, gx);
            }
        }
        Op::PairwiseEuclidean(a) => {
            if needs(*a) {
                let x = val(*a);
                let dist = &node.value;
                let (m, d) = (x.rows(), x.cols());
                let mut gx = vec![0.0; m * d];
                for i in 0..m {
                    for j in 0..m {
                        if i == j {
                            continue;
                        }
                        let coeff = g[i * m + j] / dist.at(i, j);
                        if coeff == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            let diff = x.at(i, t) - x.at(j, t);
                            gx[i * d + t] += coeff * diff;
                            gx[j * d + t] -= coeff * diff;
                        }
                    }
                }
                accumulate(grads, *a, gx);
            }
        }
        Op::ExpNegScale { input, alpha } => {
            if needs(*input) {
                let gx = node.value.data().iter().zip(g).map(|(y, gi)| -alpha * y * gi).collect();
                accumulate(grads, *input, gx);
            }
        }
        Op::MaskedSum { input, mask } => {
            if needs(*input) {
                let gx = mask.bits().iter().map(|&b| if b { g[0] } else { 0.0 }).collect();
                accumulate(grads, *input, gx);
            }
        }
        Op::WeightedSum { input, weights } => {
            if needs(*input) {
                accumulate(grads, *input, weights.iter().map(|w| w * g[0]).collect());
            }
        }
        Op::SoftmaxCrossEntropy { logits, labels, probs } => {
            if needs(*logits) {
                let m = labels.len();
                let c = probs.len() / m;
                let scale = g[0] / m as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &label) in labels.iter().enumerate() {
                    gx[i * c + label] -= scale;
                }
                accumulate(grads, *logits, gx);
            }
        }
        Op::BatchNormTrain { input, gamma, beta, normalized, inv_std } => {
            let (m, d) = (node.value.rows(), node.value.cols());
            let gamma_v = val(*gamma).data();
            affine_backward(grads, needs(*gamma), needs(*beta), *gamma, *beta, g, normalized, d);
            if needs(*input) {
                let mut gx = vec![0.0; m * d];
                for j in 0..d {
                    let mut sum_gh = 0.0;
                    let mut sum_gh_h = 0.0;
                    for i in 0..m {
                        let gh = g[i * d + j] * gamma_v[j];
                        sum_gh += gh;
                        sum_gh_h += gh * normalized[i * d + j];
                    }
                    let mf = m as f64;
                    for i in 0..m {
                        let gh = g[i * d + j] * gamma_v[j];
                        gx[i * d + j] =
                            inv_std[j] / mf * (mf * gh - sum_gh - normalized[i * d + j] * sum_gh_h);
                    }
                }
                accumulate(grads, *input, gx);
            }
        }
        Op::BatchNormEval { input, gamma, beta, normalized, inv_std } => {
            let d = node.value.cols();
            let gamma_v = val(*gamma).data();
            affine_backward(grads, needs(*gamma), needs(*beta), *gamma, *beta, g, normalized, d);
            if needs(*input) {
                let gx = g.iter().enumerate().map(|(idx, gi)| gi * gamma_v[idx % d] * inv_std[idx % d]).collect();
                accumulate(grads, *input, gx);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn affine_backward(
    grads: &mut [Option<Vec<f64>>],
    need_gamma: bool,
    need_beta: bool,
    gamma: Var,
    beta: Var,
    g: &[f64],
    normalized: &[f64],
    d: usize,
) {
    if need_gamma {
        let mut gg = vec![0.0; d];
        for (idx, gi) in g.iter().enumerate() {
            gg[idx % d] += gi * normalized[idx];
        }
        accumulate(grads, gamma, gg);
    }
    if need_beta {
        let mut gb = vec![0.0; d];
        for (idx, gi) in g.iter().enumerate() {
            gb[idx % d] += gi;
        }
        accumulate(grads, beta, gb);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite-difference check of `f(inputs)` against the tape's
    /// gradients. Returns the worst relative error over all inputs.
    fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
    where
        F: Fn(&Tape, &[Var]) -> Var,
    {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars);
        tape.backward(out).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for (idx, input) in inputs.iter().enumerate() {
            let analytic = tape.grad(vars[idx]).unwrap();
            let mut numeric = vec![0.0; input.len()];
            for p in 0..input.len() {
                let eval = |delta: f64| {
                    let mut perturbed: Vec<Tensor> = inputs.to_vec();
                    perturbed[idx].data_mut()[p] += delta;
                    let t = Tape::new();
                    let vs: Vec<Var> = perturbed.into_iter().map(|x| t.constant(x)).collect();
                    let o = f(&t, &vs);
                    t.item(o)
                };
                numeric[p] = (eval(h) - eval(-h)) / (2.0 * h);
            }
            let diff: f64 = analytic.data().iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-12);
            worst = worst.max(diff / scale);
        }
        worst
    }

    fn probe(tape: &Tape, v: Var, weights: &[f64]) -> Var {
        tape.weighted_sum(v, weights).unwrap()
    }

    fn weights(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_values() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let i = tape.constant(Tensor::identity(2));
        let ones = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        assert_eq!(tape.value(tape.matmul(a, i).unwrap()).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.value(tape.matmul(a, ones).unwrap()).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[4, 3], &mut rng);
        let b = random(&[3, 2], &mut rng);
        let w = weights(8, 2);
        let err = gradcheck(&[a, b], |t, v| probe(t, t.matmul(v[0], v[1]).unwrap(), &w));
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn add_row_bias_values_and_gradient() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert_eq!(tape.value(tape.add_row_bias(z, b).unwrap()).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);

        let a = Tensor::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        let az = tape.constant(a.clone());
        let zb = tape.constant(Tensor::zeros(&[3]));
        assert_eq!(tape.value(tape.add_row_bias(az, zb).unwrap()), a);
        assert!(tape.add_row_bias(az, tape.constant(Tensor::zeros(&[2]))).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[5, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let w = weights(15, 4);
        let err = gradcheck(&[a, b], |t, v| probe(t, t.add_row_bias(v[0], v[1]).unwrap(), &w));
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn relu_values_and_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        // subgradient at exactly zero is zero
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let pos = Tensor::vector(vec![0.3, 1.0, 4.0]);
        let p = tape.constant(pos.clone());
        assert_eq!(tape.value(tape.relu(p).unwrap()), pos);

        // stay away from the kink
        let data: Vec<f64> = weights(12, 5).into_iter().map(|v| if v.abs() < 0.1 { v + 0.3 } else { v }).collect();
        let a = Tensor::new(vec![3, 4], data).unwrap();
        let w = weights(12, 6);
        let err = gradcheck(&[a], |t, v| probe(t, t.relu(v[0]).unwrap(), &w));
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn l2_normalize_values_and_gradient() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![0.6, 0.8], vec![0.0, 0.0]]).unwrap());
        let y = tape.value(tape.l2_normalize_rows(x, 1e-12).unwrap());
        assert!((y.at(0, 0) - 0.6).abs() < 1e-15 && (y.at(0, 1) - 0.8).abs() < 1e-15);
        assert!((y.at(1, 0) - 0.6).abs() < 1e-15 && (y.at(1, 1) - 0.8).abs() < 1e-15);
        assert_eq!(y.row(2), &[0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[5, 4], &mut rng);
        let w = weights(20, 8);
        let err = gradcheck(&[a], |t, v| probe(t, t.l2_normalize_rows(v[0], 1e-12).unwrap(), &w));
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn pairwise_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap());
        let d = tape.value(tape.pairwise_euclidean(x, 1e-12).unwrap());
        assert!((d.at(0, 1) - 5.0).abs() < 1e-12);
        assert_eq!(d.at(0, 0), 1e-6);

        let same = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap());
        let d = tape.value(tape.pairwise_euclidean(same, 1e-12).unwrap());
        assert_eq!(d.at(0, 1), 1e-6);
    }

    #[test]
    fn pairwise_matches_double_loop_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(&[6, 3], &mut rng);
        let tape = Tape::new();
        let d = tape.value(tape.pairwise_euclidean(tape.constant(a.clone()), 1e-12).unwrap());
        for i in 0..6 {
            for j in 0..6 {
                let mut sq = 0.0;
                for t in 0..3 {
                    sq += (a.at(i, t) - a.at(j, t)).powi(2);
                }
                let expected = (sq + 1e-12).sqrt();
                assert!((d.at(i, j) - expected).abs() < 1e-9);
            }
        }
        let w = weights(36, 10);
        let err = gradcheck(&[a], |t, v| probe(t, t.pairwise_euclidean(v[0], 1e-12).unwrap(), &w));
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn exp_neg_scale_values_and_gradient() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        let y = tape.value(tape.exp_neg_scale(x, 2.0).unwrap());
        assert_eq!(y.data()[0], 1.0);
        assert!((y.data()[1] - 0.135335).abs() < 1e-6);
        assert!(tape.exp_neg_scale(x, 0.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&[3, 3], &mut rng);
        let w = weights(9, 12);
        let err = gradcheck(&[a], |t, v| probe(t, t.exp_neg_scale(v[0], 1.7).unwrap(), &w));
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn masked_sum_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random(&[4, 4], &mut rng);
        let tape = Tape::new();
        let x = tape.leaf(a.clone());
        assert_eq!(tape.item(tape.masked_sum(x, &Mask::new(4, 4)).unwrap()), 0.0);
        let all = tape.item(tape.masked_sum(x, &Mask::ones(4, 4)).unwrap());
        assert!((all - a.data().iter().sum::<f64>()).abs() < 1e-15);

        let bits: Vec<bool> = (0..16).map(|_| rng.random_bool(0.5)).collect();
        let mask = Mask::from_bits(4, 4, bits).unwrap();
        let mut expected = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if mask.get(i, j) {
                    expected += a.at(i, j);
                }
            }
        }
        let s = tape.masked_sum(x, &mask).unwrap();
        assert!((tape.item(s) - expected).abs() < 1e-15);
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        for (gv, &b) in g.data().iter().zip(mask.bits()) {
            assert_eq!(*gv, if b { 1.0 } else { 0.0 });
        }
        assert!(tape.masked_sum(x, &Mask::new(3, 4)).is_err());
    }

    #[test]
    fn softmax_cross_entropy_values_and_gradient() {
        let tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[2, 4]));
        let l = tape.item(tape.softmax_cross_entropy(uniform, &[0, 3]).unwrap());
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.386294).abs() < 1e-6);

        let confident = tape.constant(Tensor::from_rows(&[vec![1000.0, 0.0, 0.0]]).unwrap());
        let l = tape.item(tape.softmax_cross_entropy(confident, &[0]).unwrap());
        assert!(l.abs() < 1e-12);

        assert!(matches!(
            tape.softmax_cross_entropy(uniform, &[0, 4]),
            Err(Error::LabelOutOfRange { label: 4, num_classes: 4 })
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = random(&[3, 5], &mut rng);
        let labels = [1, 4, 0];
        let err = gradcheck(&[a], |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap());
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = random(&[6, 3], &mut rng);
        let gamma = random(&[3], &mut rng);
        let beta = random(&[3], &mut rng);
        let w = weights(18, 16);
        let err = gradcheck(&[x.clone(), gamma.clone(), beta.clone()], |t, v| {
            probe(t, t.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0, &w)
        });
        assert!(err < 1e-5, "train rel err {err}");
        let (mean, var) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);
        let err = gradcheck(&[x, gamma, beta], |t, v| {
            probe(t, t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap(), &w)
        });
        assert!(err < 1e-6, "eval rel err {err}");
    }

    #[test]
    fn backward_sum_and_fan_out() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0]));
        let c = tape.constant(Tensor::vector(vec![5.0]));
        let s = tape.sum(tape.add(x, c).unwrap()).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1000.0]));
        assert!(matches!(tape.exp_neg_scale(x, 1.0), Err(Error::NonFinite { .. })));
    }
}
