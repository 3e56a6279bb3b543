//! Dataset descriptions that can be stored in a checkpoint and reloaded.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{self, load_csv, load_idx, standardize, CsvSchema, Dataset, Split, Standardizer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Blobs {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        dim: usize,
        spread: f64,
    },
    Multicluster {
        classes: usize,
        clusters_per_class: usize,
        train_per_cluster: usize,
        test_per_cluster: usize,
        dim: usize,
        spread: f64,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: String,
        #[serde(default)]
        num_classes: Option<usize>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        num_classes: Option<usize>,
    },
}

fn default_label_column() -> String {
    "label".into()
}

/// Input dimension of the default blobs task. Only a two-dimensional
/// subspace separates the classes; the rest is isotropic noise.
pub const BLOBS_DIM: usize = 8;

impl DatasetSpec {
    /// 3 classes, 100 train and 100 test examples each, spread 0.5.
    pub fn default_blobs() -> DatasetSpec {
        DatasetSpec::Blobs { classes: 3, train_per_class: 100, test_per_class: 100, dim: BLOBS_DIM, spread: 0.5 }
    }

    /// 2 classes of 2 well separated clusters, one per input dimension.
    pub fn default_multicluster() -> DatasetSpec {
        DatasetSpec::Multicluster {
            classes: 2,
            clusters_per_class: 2,
            train_per_cluster: 100,
            test_per_cluster: 50,
            dim: 4,
            spread: 0.3,
        }
    }

    /// Unnormalized train and test splits. Synthetic splits draw from
    /// independent streams of `seed`.
    pub fn load_raw(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Blobs { classes, train_per_class, test_per_class, dim, spread } => Ok((
                data::synth::generate(*classes, 1, *train_per_class, *dim, *spread, seed, Split::Train, "blobs")?,
                data::synth::generate(*classes, 1, *test_per_class, *dim, *spread, seed, Split::Test, "blobs")?,
            )),
            DatasetSpec::Multicluster { classes, clusters_per_class, train_per_cluster, test_per_cluster, dim, spread } => {
                let make = |per: usize, split| {
                    data::synth::generate(*classes, *clusters_per_class, per, *dim, *spread, seed, split, "multicluster")
                };
                Ok((make(*train_per_cluster, Split::Train)?, make(*test_per_cluster, Split::Test)?))
            }
            DatasetSpec::Csv { train, test, label_column, num_classes } => {
                let schema = CsvSchema { label_column: label_column.clone(), num_classes: *num_classes };
                let tr = load_csv(train, &schema, Split::Train)?;
                let schema = CsvSchema { num_classes: Some(tr.num_classes), ..schema };
                let te = load_csv(test, &schema, Split::Test)?;
                Ok((tr, te))
            }
            DatasetSpec::Idx { train_images, train_labels, test_images, test_labels, num_classes } => {
                let tr = load_idx(train_images, train_labels, *num_classes, Split::Train)?;
                let te = load_idx(test_images, test_labels, Some(tr.num_classes), Split::Test)?;
                Ok((tr, te))
            }
        }
    }

    /// Train and test splits standardized with training statistics.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset, Standardizer)> {
        let (train, test) = self.load_raw(seed)?;
        if train.num_classes != test.num_classes {
            return Err(Error::Config(format!(
                "train split has {} classes, test split {}",
                train.num_classes, test.num_classes
            )));
        }
        standardize(&train, &test)
    }
}
