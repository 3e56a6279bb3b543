//! MLP embedding network with a selectable output head.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

/// Floor on the row norm for the L2 head.
pub const NORMALIZE_EPS: f64 = 1e-12;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Project each output row onto the unit sphere.
    #[serde(alias = "l2")]
    L2Normalize,
    /// Per-dimension batch normalization with learned scale and shift.
    #[serde(alias = "bn")]
    BatchNorm,
    /// Raw affine output (logits for cross-entropy).
    Identity,
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2_normalize" | "l2" => Ok(Head::L2Normalize),
            "batch_norm" | "bn" => Ok(Head::BatchNorm),
            "identity" => Ok(Head::Identity),
            other => Err(Error::Config(format!("unknown head '{other}' (l2_normalize, batch_norm, identity)"))),
        }
    }
}

impl std::fmt::Display for Head {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Head::L2Normalize => "l2_normalize",
            Head::BatchNorm => "batch_norm",
            Head::Identity => "identity",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub head: Head,
    pub seed: u64,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config(format!(
                "all layer widths must be >= 1 (input {}, hidden {:?}, output {})",
                self.input_dim, self.hidden_dims, self.output_dim
            )));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_dims);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Weight stored as `in × out` so a batch maps by `x · W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormHead {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Scale,
    Shift,
}

/// Result of recording a forward pass on a tape.
#[derive(Debug)]
pub struct Forward {
    pub output: Var,
    /// Tape handles of the trainable tensors, in [`ModelParams::trainable`] order.
    pub params: Vec<Var>,
    /// Present for the batch-norm head in training mode.
    pub batch_stats: Option<BatchStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: MlpConfig,
    pub layers: Vec<Linear>,
    pub batch_norm: Option<BatchNormHead>,
}

impl ModelParams {
    /// He initialization: weights from N(0, 2/fan_in), zero biases.
    pub fn init(config: &MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, streams::INIT);
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let data = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
                Linear {
                    weight: Tensor::matrix(fan_in, fan_out, data).expect("weight shape"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        let d = config.output_dim;
        let batch_norm = (config.head == Head::BatchNorm).then(|| BatchNormHead {
            gamma: Tensor::full(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
            running_mean: vec![0.0; d],
            running_var: vec![1.0; d],
            momentum: BATCH_NORM_MOMENTUM,
            eps: BATCH_NORM_EPS,
        });
        Ok(ModelParams { config: config.clone(), layers, batch_norm })
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    /// Trainable tensors in a fixed order: each layer's weight then bias,
    /// followed by the batch-norm scale and shift when present.
    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect();
        if let Some(bn) = &self.batch_norm {
            out.push(&bn.gamma);
            out.push(&bn.beta);
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect();
        if let Some(bn) = &mut self.batch_norm {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out
    }

    pub fn param_kinds(&self) -> Vec<ParamKind> {
        let mut out: Vec<ParamKind> = self.layers.iter().flat_map(|_| [ParamKind::Weight, ParamKind::Bias]).collect();
        if self.batch_norm.is_some() {
            out.extend([ParamKind::Scale, ParamKind::Shift]);
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.layers.len())
            .flat_map(|i| [format!("layer{i}.weight"), format!("layer{i}.bias")])
            .collect();
        if self.batch_norm.is_some() {
            out.push("batch_norm.gamma".into());
            out.push("batch_norm.beta".into());
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.trainable().iter().all(|t| t.all_finite())
            && self
                .batch_norm
                .as_ref()
                .is_none_or(|bn| bn.running_mean.iter().chain(&bn.running_var).all(|v| v.is_finite()))
    }

    /// Records `linear → ReLU → … → linear → head` on `tape`.
    pub fn forward(&self, tape: &Tape, x: Var, mode: Mode) -> Result<Forward> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(Error::shape(
                "ModelParams::forward",
                format!("input shape {:?}, expected n x {}", shape, self.config.input_dim),
            ));
        }
        let mut params = Vec::new();
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.leaf(layer.weight.clone());
            let b = tape.leaf(layer.bias.clone());
            params.push(w);
            params.push(b);
            h = tape.add_row_bias(tape.matmul(h, w)?, b)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        let mut batch_stats = None;
        let output = match self.config.head {
            Head::Identity => h,
            Head::L2Normalize => tape.l2_normalize_rows(h, NORMALIZE_EPS)?,
            Head::BatchNorm => {
                let bn = self.batch_norm.as_ref().ok_or_else(|| {
                    Error::Config("batch_norm head without batch-norm parameters".into())
                })?;
                let gamma = tape.leaf(bn.gamma.clone());
                let beta = tape.leaf(bn.beta.clone());
                params.push(gamma);
                params.push(beta);
                match mode {
                    Mode::Train => {
                        let (out, stats) = tape.batch_norm_train(h, gamma, beta, bn.eps)?;
                        batch_stats = Some(stats);
                        out
                    }
                    Mode::Eval => {
                        tape.batch_norm_eval(h, gamma, beta, &bn.running_mean, &bn.running_var, bn.eps)?
                    }
                }
            }
        };
        Ok(Forward { output, params, batch_stats })
    }

    /// Evaluation-mode forward pass without gradient bookkeeping.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let input = tape.constant(x.clone());
        let fwd = self.forward(&tape, input, Mode::Eval)?;
        Ok(tape.value(fwd.output))
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn absorb_batch_stats(&mut self, stats: &BatchStats) {
        let Some(bn) = &mut self.batch_norm else { return };
        let m = bn.momentum;
        let correction = if stats.count > 1 { stats.count as f64 / (stats.count - 1) as f64 } else { 1.0 };
        for j in 0..bn.running_mean.len() {
            bn.running_mean[j] = (1.0 - m) * bn.running_mean[j] + m * stats.mean[j];
            bn.running_var[j] = (1.0 - m) * bn.running_var[j] + m * stats.var[j] * correction;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(hidden: Vec<usize>, d: usize, head: Head) -> MlpConfig {
        MlpConfig { input_dim: 4, hidden_dims: hidden, output_dim: d, head, seed: 11 }
    }

    fn random_input(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let c = config(vec![8, 8], 3, Head::L2Normalize);
        let a = ModelParams::init(&c).unwrap();
        let b = ModelParams::init(&c).unwrap();
        assert_eq!(a, b);
        let other = ModelParams::init(&MlpConfig { seed: 12, ..c }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn zero_depth_is_single_affine_layer() {
        let mut p = ModelParams::init(&config(vec![], 2, Head::Identity)).unwrap();
        assert_eq!(p.layers.len(), 1);
        assert_eq!(p.layers[0].weight.shape(), &[4, 2]);
        p.layers[0].bias = Tensor::vector(vec![0.5, -1.0]);
        let x = random_input(3, 4, 1);
        let y = p.predict(&x).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let expected: f64 = (0..4).map(|t| x.at(i, t) * p.layers[0].weight.at(t, j)).sum::<f64>()
                    + p.layers[0].bias.data()[j];
                assert!((y.at(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn he_init_variance() {
        let c = MlpConfig { input_dim: 512, hidden_dims: vec![], output_dim: 512, head: Head::Identity, seed: 3 };
        let p = ModelParams::init(&c).unwrap();
        let w = p.layers[0].weight.data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let target = 2.0 / 512.0;
        assert!((var - target).abs() < 0.2 * target, "var {var} vs {target}");
        assert!(p.layers[0].bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn l2_head_outputs_unit_rows() {
        let p = ModelParams::init(&config(vec![16], 5, Head::L2Normalize)).unwrap();
        let y = p.predict(&random_input(20, 4, 2)).unwrap();
        for i in 0..20 {
            let norm = y.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_head_training_statistics() {
        let p = ModelParams::init(&config(vec![16], 3, Head::BatchNorm)).unwrap();
        let x = Tensor::matrix(32, 4, random_input(32, 4, 3).data().iter().map(|v| v * 100.0).collect()).unwrap();
        let tape = Tape::new();
        let input = tape.constant(x);
        let fwd = p.forward(&tape, input, Mode::Train).unwrap();
        let y = tape.value(fwd.output);
        let stats = fwd.batch_stats.unwrap();
        for j in 0..3 {
            let col: Vec<f64> = (0..32).map(|i| y.at(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 32.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
            let contraction = stats.var[j] / (stats.var[j] + BATCH_NORM_EPS);
            assert!((var - contraction).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_statistics() {
        let mut p = ModelParams::init(&config(vec![8], 2, Head::BatchNorm)).unwrap();
        let x = random_input(10, 4, 4);
        let before = p.predict(&x).unwrap();
        let stats = BatchStats { mean: vec![1.0, -1.0], var: vec![4.0, 0.25], count: 10 };
        p.absorb_batch_stats(&stats);
        let bn = p.batch_norm.as_ref().unwrap();
        assert!((bn.running_mean[0] - 0.1).abs() < 1e-15);
        assert!((bn.running_var[0] - (0.9 + 0.1 * 4.0 * 10.0 / 9.0)).abs() < 1e-15);
        let after = p.predict(&x).unwrap();
        assert_ne!(before, after);
        assert_eq!(after, p.predict(&x).unwrap());
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = ModelParams::init(&config(vec![4], 2, Head::Identity)).unwrap();
        assert!(p.predict(&random_input(3, 5, 5)).is_err());
    }

    #[test]
    fn invalid_config() {
        assert!(ModelParams::init(&config(vec![0], 2, Head::Identity)).is_err());
        assert!(ModelParams::init(&config(vec![], 0, Head::Identity)).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for head in [Head::L2Normalize, Head::BatchNorm, Head::Identity] {
            let p = ModelParams::init(&config(vec![6], 3, head)).unwrap();
            let x = random_input(8, 4, 6);
            let w: Vec<f64> = random_input(8, 3, 7).into_data();
            let objective = |params: &ModelParams| -> (f64, Vec<Tensor>) {
                let tape = Tape::new();
                let input = tape.constant(x.clone());
                let fwd = params.forward(&tape, input, Mode::Train).unwrap();
                let out = tape.weighted_sum(fwd.output, &w).unwrap();
                tape.backward(out).unwrap();
                (tape.item(out), fwd.params.iter().map(|&v| tape.grad(v).unwrap()).collect())
            };
            let (_, analytic) = objective(&p);
            let h = 1e-6;
            let (mut diff, mut scale) = (0.0, 0.0);
            for (t, grad) in analytic.iter().enumerate() {
                for e in 0..grad.len() {
                    let mut plus = p.clone();
                    plus.trainable_mut()[t].data_mut()[e] += h;
                    let mut minus = p.clone();
                    minus.trainable_mut()[t].data_mut()[e] -= h;
                    let numeric = (objective(&plus).0 - objective(&minus).0) / (2.0 * h);
                    diff += (numeric - grad.data()[e]).powi(2);
                    scale += numeric * numeric;
                }
            }
            let rel = diff.sqrt() / scale.sqrt();
            assert!(rel < 1e-4, "{head}: rel err {rel}");
        }
    }
}
