//! Parametric input corruptions with five severity levels.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

pub const SEVERITIES: [u8; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    /// Additive N(0, σ²) with σ = 0.04·severity·(feature std).
    Gaussian,
    /// Each entry replaced, with probability severity %, by its feature's
    /// minimum or maximum (equally likely).
    SaltPepper,
    /// Additive U(−a, a) with a = √3·0.04·severity·(feature std), i.e. the
    /// same standard deviation as the Gaussian corruption.
    Uniform,
}

impl Corruption {
    pub const ALL: [Corruption; 3] = [Corruption::Gaussian, Corruption::SaltPepper, Corruption::Uniform];

    pub fn name(self) -> &'static str {
        match self {
            Corruption::Gaussian => "gaussian",
            Corruption::SaltPepper => "salt_pepper",
            Corruption::Uniform => "uniform",
        }
    }

    fn index(self) -> usize {
        match self {
            Corruption::Gaussian => 0,
            Corruption::SaltPepper => 1,
            Corruption::Uniform => 2,
        }
    }
}

impl std::str::FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Corruption::Gaussian),
            "salt_pepper" => Ok(Corruption::SaltPepper),
            "uniform" => Ok(Corruption::Uniform),
            other => Err(Error::InvalidArgument(format!("unknown corruption '{other}'"))),
        }
    }
}

/// Relative noise level of a severity: 0.04, 0.08, …, 0.20.
fn noise_fraction(severity: u8) -> f64 {
    0.04 * severity as f64
}

fn column_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    let mut min = vec![f64::INFINITY; d];
    let mut max = vec![f64::NEG_INFINITY; d];
    for i in 0..n {
        for j in 0..d {
            let v = x.at(i, j);
            mean[j] += v;
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let mut std = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            std[j] += (x.at(i, j) - mean[j]).powi(2);
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / n.max(1) as f64).sqrt());
    (std, min, max)
}

/// Corrupts every row of `x`. Deterministic in `(seed, kind, severity)`.
pub fn corrupt(x: &Tensor, kind: Corruption, severity: u8, seed: u64) -> Result<Tensor> {
    if !SEVERITIES.contains(&severity) {
        return Err(Error::InvalidArgument(format!("severity must be in 1..=5, got {severity}")));
    }
    x.require_matrix("corrupt")?;
    let d = x.cols();
    let (std, min, max) = column_stats(x);
    let cell = kind.index() * SEVERITIES.len() + severity as usize;
    let mut rng = rng::epoch_stream(seed, streams::CORRUPTION, cell);
    let level = noise_fraction(severity);
    let mut out = x.data().to_vec();
    for (idx, v) in out.iter_mut().enumerate() {
        let j = idx % d;
        match kind {
            Corruption::Gaussian => {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += level * std[j] * z;
            }
            Corruption::Uniform => {
                let half = 3f64.sqrt() * level * std[j];
                *v += rng.random_range(-1.0..1.0) * half;
            }
            Corruption::SaltPepper => {
                let hit = rng.random_bool(severity as f64 / 100.0);
                let high = rng.random_bool(0.5);
                if hit {
                    *v = if high { max[j] } else { min[j] };
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
