//! Run settings shared by the config file and the command-line flags.
//!
//! The config file is flat TOML whose keys are the long flag names with
//! dashes replaced by underscores:
//!
//! ```toml
//! dataset = "blobs"
//! loss = "smooth"
//! k = "max"        # or an integer
//! alpha = 2.0
//! d = 3
//! epochs = 50
//! hidden = [64, 64]
//! ```
//!
//! Precedence, lowest first: built-in defaults, config file, flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{ArgAction, Args};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::experiment::DatasetSpec;
use crate::model::Head;
use crate::optim::{OptimConfig, OptimizerKind};
use crate::train::{scaled_milestones, KSpec, LossKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Blobs,
    Multicluster,
    Csv,
    Idx,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(DatasetKind::Blobs),
            "multicluster" => Ok(DatasetKind::Multicluster),
            "csv" => Ok(DatasetKind::Csv),
            "idx" => Ok(DatasetKind::Idx),
            other => Err(Error::Config(format!("unknown dataset '{other}' (blobs, multicluster, csv, idx)"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// blobs, multicluster, csv or idx
    #[arg(long)]
    pub dataset: Option<DatasetKind>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Training examples per class (per cluster for multicluster)
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Test examples per class (per cluster for multicluster)
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long)]
    pub clusters_per_class: Option<usize>,
    /// Input dimension of synthetic data
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub spread: Option<f64>,
    #[arg(long)]
    pub train_csv: Option<PathBuf>,
    #[arg(long)]
    pub test_csv: Option<PathBuf>,
    #[arg(long)]
    pub label_column: Option<String>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub train_images: Option<PathBuf>,
    #[arg(long)]
    pub train_labels: Option<PathBuf>,
    #[arg(long)]
    pub test_images: Option<PathBuf>,
    #[arg(long)]
    pub test_labels: Option<PathBuf>,

    /// smooth (graph smoothness) or ce (cross-entropy)
    #[arg(long)]
    pub loss: Option<LossKind>,
    /// Neighbors per vertex, or "max" for batch size − 1
    #[arg(long)]
    pub k: Option<KSpec>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Embedding dimension (defaults to the number of classes)
    #[arg(long)]
    pub d: Option<usize>,
    /// Hidden layer widths, comma separated
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// l2_normalize, batch_norm or identity
    #[arg(long)]
    pub head: Option<Head>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// sgd (Nesterov) or adam
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Epochs at which the learning rate is multiplied by gamma
    #[arg(long, value_delimiter = ',')]
    pub milestones: Option<Vec<usize>>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Probe accuracy every this many epochs; 0 disables
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Guarantee two classes per batch
    #[arg(long, action = ArgAction::Set)]
    pub stratified: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

macro_rules! overlay {
    ($low:expr, $high:expr; $($field:ident),* $(,)?) => {
        Settings { $($field: $high.$field.or($low.$field)),* }
    };
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Settings> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Values of `self` win over `base`.
    pub fn over(self, base: Settings) -> Settings {
        overlay!(base, self;
            dataset, classes, per_class, test_per_class, clusters_per_class, dim, spread,
            train_csv, test_csv, label_column, num_classes,
            train_images, train_labels, test_images, test_labels,
            loss, k, alpha, d, hidden, head, epochs, batch_size, optimizer, lr, momentum,
            weight_decay, milestones, gamma, eval_every, stratified, seed, out,
        )
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("smoothloss-out"))
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let kind = self.dataset.unwrap_or(DatasetKind::Blobs);
        let required = |value: &Option<PathBuf>, flag: &str| {
            value.clone().ok_or_else(|| Error::Config(format!("dataset {kind:?} needs --{flag}").to_lowercase()))
        };
        Ok(match kind {
            DatasetKind::Blobs => {
                let DatasetSpec::Blobs { classes, train_per_class, test_per_class, dim, spread } = DatasetSpec::default_blobs()
                else {
                    unreachable!()
                };
                DatasetSpec::Blobs {
                    classes: self.classes.unwrap_or(classes),
                    train_per_class: self.per_class.unwrap_or(train_per_class),
                    test_per_class: self.test_per_class.unwrap_or(test_per_class),
                    dim: self.dim.unwrap_or(dim),
                    spread: self.spread.unwrap_or(spread),
                }
            }
            DatasetKind::Multicluster => {
                let DatasetSpec::Multicluster { classes, clusters_per_class, train_per_cluster, test_per_cluster, dim, spread } =
                    DatasetSpec::default_multicluster()
                else {
                    unreachable!()
                };
                DatasetSpec::Multicluster {
                    classes: self.classes.unwrap_or(classes),
                    clusters_per_class: self.clusters_per_class.unwrap_or(clusters_per_class),
                    train_per_cluster: self.per_class.unwrap_or(train_per_cluster),
                    test_per_cluster: self.test_per_class.unwrap_or(test_per_cluster),
                    dim: self.dim.unwrap_or(dim),
                    spread: self.spread.unwrap_or(spread),
                }
            }
            DatasetKind::Csv => DatasetSpec::Csv {
                train: required(&self.train_csv, "train-csv")?,
                test: required(&self.test_csv, "test-csv")?,
                label_column: self.label_column.clone().unwrap_or_else(|| "label".into()),
                num_classes: self.num_classes,
            },
            DatasetKind::Idx => DatasetSpec::Idx {
                train_images: required(&self.train_images, "train-images")?,
                train_labels: required(&self.train_labels, "train-labels")?,
                test_images: required(&self.test_images, "test-images")?,
                test_labels: required(&self.test_labels, "test-labels")?,
                num_classes: self.num_classes,
            },
        })
    }

    /// The training configuration for data with `input_dim` features and
    /// `num_classes` classes, starting from the desk-scale protocol.
    pub fn train_config(&self, input_dim: usize, num_classes: usize) -> Result<TrainConfig> {
        let loss = self.loss.unwrap_or(LossKind::GraphSmoothness);
        let mut cfg = TrainConfig::protocol(loss, input_dim, num_classes).with_seed(self.seed());
        if let Some(kind) = self.optimizer {
            if kind == OptimizerKind::Adam && cfg.optim.kind != OptimizerKind::Adam {
                cfg.optim = OptimConfig { milestones: cfg.optim.milestones.clone(), ..OptimConfig::adam() };
            }
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(alpha) = self.alpha {
            cfg.alpha = alpha;
        }
        if let Some(d) = self.d {
            cfg.model.output_dim = d;
        }
        if let Some(hidden) = &self.hidden {
            cfg.model.hidden_dims = hidden.clone();
        }
        if let Some(head) = self.head {
            cfg.model.head = head;
        }
        if let Some(epochs) = self.epochs {
            cfg.epochs = epochs;
            cfg.optim.milestones = scaled_milestones(epochs);
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.optim.lr0 = lr;
        }
        if let Some(m) = self.momentum {
            cfg.optim.momentum = m;
        }
        if let Some(wd) = self.weight_decay {
            cfg.optim.weight_decay = wd;
        }
        if let Some(ms) = &self.milestones {
            cfg.optim.milestones = ms.clone();
        }
        if let Some(g) = self.gamma {
            cfg.optim.gamma = g;
        }
        if let Some(e) = self.eval_every {
            cfg.eval_every = e;
        }
        if let Some(s) = self.stratified {
            cfg.stratified = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let file: Settings = toml::from_str("loss = \"ce\"\nk = 5\nalpha = 1.5\nepochs = 7\nhidden = [4]").unwrap();
        let flags = Settings { alpha: Some(3.0), ..Settings::default() };
        let merged = flags.over(file);
        assert_eq!(merged.loss, Some(LossKind::CrossEntropy));
        assert_eq!(merged.k, Some(KSpec::Value(5)));
        assert_eq!(merged.alpha, Some(3.0));
        assert_eq!(merged.hidden, Some(vec![4]));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Settings>("learning_rate = 0.1").is_err());
        assert!(toml::from_str::<Settings>("k = \"many\"").is_err());
    }

    #[test]
    fn defaults_follow_the_protocol() {
        let s = Settings::default();
        let cfg = s.train_config(8, 3).unwrap();
        assert_eq!(cfg, TrainConfig::protocol(LossKind::GraphSmoothness, 8, 3));
        let ce = Settings { loss: Some(LossKind::CrossEntropy), ..Settings::default() }.train_config(8, 3).unwrap();
        assert_eq!(ce.model.head, Head::Identity);
        assert_eq!(ce.model.output_dim, 3);
        let short = Settings { epochs: Some(20), ..Settings::default() }.train_config(8, 3).unwrap();
        assert_eq!(short.optim.milestones, vec![10, 15]);
    }

    #[test]
    fn file_datasets_need_paths() {
        let s = Settings { dataset: Some(DatasetKind::Csv), ..Settings::default() };
        assert!(s.dataset_spec().unwrap_err().to_string().contains("--train-csv"));
    }
}
