//! SGD with Nesterov momentum, Adam, and a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamKind;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[serde(alias = "sgd")]
    SgdNesterov,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" | "sgd_nesterov" => Ok(OptimizerKind::SgdNesterov),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer '{other}' (sgd, adam)"))),
        }
    }
}

/// Which parameters receive weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayScope {
    All,
    WeightsOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    /// Epochs at which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub decay_scope: DecayScope,
}

impl Default for OptimConfig {
    /// SGD, lr 0.1, Nesterov momentum 0.9, weight decay 1e-4, lr divided by
    /// 10 at epochs 100 and 150.
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::SgdNesterov,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            milestones: vec![100, 150],
            gamma: 0.1,
            decay_scope: DecayScope::All,
        }
    }
}

impl OptimConfig {
    /// Adam with lr 0.001 and the same step schedule.
    pub fn adam() -> Self {
        OptimConfig { kind: OptimizerKind::Adam, lr0: 1e-3, ..OptimConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.lr0 > 0.0) {
            return fail(format!("lr must be > 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("milestones must be strictly increasing, got {:?}", self.milestones));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.adam_eps > 0.0) {
            return fail("adam betas must be in [0, 1) and eps > 0".into());
        }
        Ok(())
    }

    /// `lr0 · gamma^(number of milestones <= epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr0 * self.gamma.powi(passed as i32)
    }
}

/// One Nesterov SGD update of a single tensor, with L2 weight decay folded
/// into the gradient:
/// `g ← g + wd·p; v ← m·v + g; p ← p − lr·(g + m·v)`.
pub fn sgd_step(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * (g + momentum * *v);
    }
}

/// One bias-corrected Adam update of a single tensor at step `t` (1-based).
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    first: &mut [f64],
    second: &mut [f64],
    t: u64,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) {
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i] + weight_decay * param[i];
        first[i] = b1 * first[i] + (1.0 - b1) * g;
        second[i] = b2 * second[i] + (1.0 - b2) * g * g;
        let m_hat = first[i] / c1;
        let v_hat = second[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimState {
    Sgd { velocity: Vec<Vec<f64>> },
    Adam { first: Vec<Vec<f64>>, second: Vec<Vec<f64>>, step: u64 },
}

/// Optimizer state bound to a fixed list of parameter shapes.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimConfig,
    state: OptimState,
    sizes: Vec<usize>,
}

impl Optimizer {
    pub fn new(config: OptimConfig, params: &[&Tensor]) -> Result<Self> {
        config.validate()?;
        let sizes: Vec<usize> = params.iter().map(|t| t.len()).collect();
        let zeros = || sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let state = match config.kind {
            OptimizerKind::SgdNesterov => OptimState::Sgd { velocity: zeros() },
            OptimizerKind::Adam => OptimState::Adam { first: zeros(), second: zeros(), step: 0 },
        };
        Ok(Optimizer { config, state, sizes })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    pub fn state(&self) -> &OptimState {
        &self.state
    }

    /// Applies one update with learning rate `lr` to every parameter.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], kinds: &[ParamKind], lr: f64) -> Result<()> {
        if params.len() != self.sizes.len() || grads.len() != self.sizes.len() || kinds.len() != self.sizes.len() {
            return Err(Error::shape(
                "Optimizer::step",
                format!("{} params / {} grads for {} slots", params.len(), grads.len(), self.sizes.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.sizes[i] || g.len() != self.sizes[i] {
                return Err(Error::shape(
                    "Optimizer::step",
                    format!("slot {}: param {} / grad {} vs {}", i, p.len(), g.len(), self.sizes[i]),
                ));
            }
        }
        let decay = |kind: ParamKind| match (self.config.decay_scope, kind) {
            (DecayScope::All, _) | (DecayScope::WeightsOnly, ParamKind::Weight) => self.config.weight_decay,
            _ => 0.0,
        };
        let decays: Vec<f64> = kinds.iter().map(|&k| decay(k)).collect();
        match &mut self.state {
            OptimState::Sgd { velocity } => {
                for (i, p) in params.iter_mut().enumerate() {
                    sgd_step(p.data_mut(), grads[i].data(), &mut velocity[i], lr, self.config.momentum, decays[i]);
                }
            }
            OptimState::Adam { first, second, step } => {
                *step += 1;
                for (i, p) in params.iter_mut().enumerate() {
                    adam_step(
                        p.data_mut(),
                        grads[i].data(),
                        &mut first[i],
                        &mut second[i],
                        *step,
                        lr,
                        self.config.adam_betas,
                        self.config.adam_eps,
                        decays[i],
                    );
                }
            }
        }
        Ok(())
    }
}
