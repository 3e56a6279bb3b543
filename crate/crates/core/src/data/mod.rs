//! Datasets: synthetic generators, file loaders, standardization, input
//! corruptions and mini-batch plans.

mod batch;
mod corrupt;
mod io;
pub(crate) mod synth;

pub use batch::{make_batches, Batch, BatchPlan};
pub use corrupt::{corrupt, Corruption, SEVERITIES};
pub use io::{load_csv, load_idx, write_csv, write_idx_images, write_idx_labels, CsvSchema};
pub use synth::{gen_blobs, gen_multicluster, CENTER_DISTANCE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub name: String,
    /// Generator cluster of each example, when known.
    pub cluster_ids: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, split: Split, name: impl Into<String>) -> Result<Self> {
        let ds = Dataset { inputs, labels, num_classes, split, name: name.into(), cluster_ids: None };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        self.inputs.require_matrix("Dataset")?;
        if self.inputs.rows() != self.labels.len() {
            return Err(Error::shape(
                "Dataset",
                format!("{} rows vs {} labels", self.inputs.rows(), self.labels.len()),
            ));
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes: self.num_classes });
        }
        if !self.inputs.all_finite() {
            return Err(Error::InvalidArgument(format!("dataset '{}' has non-finite inputs", self.name)));
        }
        if self.split == Split::Train {
            let counts = self.class_counts();
            if let Some(c) = counts.iter().position(|&n| n == 0) {
                return Err(Error::InvalidArgument(format!("class {c} is empty in training split '{}'", self.name)));
            }
        }
        if let Some(ids) = &self.cluster_ids {
            if ids.len() != self.labels.len() {
                return Err(Error::shape("Dataset", "cluster ids must match label count"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Same examples with replaced inputs.
    pub fn with_inputs(&self, inputs: Tensor) -> Result<Dataset> {
        let ds = Dataset { inputs, ..self.clone() };
        ds.validate()?;
        Ok(ds)
    }
}

/// Per-feature affine normalization fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Mean and population standard deviation per feature. Constant features
    /// keep their values: mean 0 and scale 1.
    pub fn fit(inputs: &Tensor) -> Standardizer {
        let (n, d) = (inputs.rows(), inputs.cols());
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for i in 0..n {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += inputs.at(i, j);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        for i in 0..n {
            for j in 0..d {
                var[j] += (inputs.at(i, j) - mean[j]).powi(2);
            }
        }
        let mut scale = vec![1.0; d];
        for j in 0..d {
            let v = var[j] / n.max(1) as f64;
            if v > 0.0 {
                scale[j] = v.sqrt();
            } else {
                mean[j] = 0.0;
            }
        }
        Standardizer { mean, scale }
    }

    pub fn apply(&self, inputs: &Tensor) -> Result<Tensor> {
        let d = inputs.cols();
        if d != self.mean.len() {
            return Err(Error::shape("Standardizer::apply", format!("{} features vs {}", d, self.mean.len())));
        }
        let data = inputs
            .data()
            .iter()
            .enumerate()
            .map(|(idx, v)| (v - self.mean[idx % d]) / self.scale[idx % d])
            .collect();
        Tensor::new(inputs.shape().to_vec(), data)
    }
}

/// Standardizes both splits with statistics of the training split only.
pub fn standardize(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset, Standardizer)> {
    if train.input_dim() != test.input_dim() {
        return Err(Error::shape(
            "standardize",
            format!("train has {} features, test {}", train.input_dim(), test.input_dim()),
        ));
    }
    let stats = Standardizer::fit(&train.inputs);
    let tr = train.with_inputs(stats.apply(&train.inputs)?)?;
    let te = test.with_inputs(stats.apply(&test.inputs)?)?;
    Ok((tr, te, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(rows: &[Vec<f64>], labels: Vec<usize>, split: Split) -> Dataset {
        Dataset::new(Tensor::from_rows(rows).unwrap(), labels, 2, split, "t").unwrap()
    }

    #[test]
    fn constant_feature_is_unchanged() {
        let train = ds(&[vec![5.0, 1.0], vec![5.0, 3.0]], vec![0, 1], Split::Train);
        let (tr, _, stats) = standardize(&train, &train.clone()).unwrap();
        assert_eq!(tr.inputs.at(0, 0), 5.0);
        assert_eq!(tr.inputs.at(1, 0), 5.0);
        assert_eq!(stats.scale[0], 1.0);
    }

    #[test]
    fn train_statistics_after_transform() {
        let train = gen_blobs(3, 40, 5, 0.7, 1).unwrap();
        let (tr, _, _) = standardize(&train, &train.clone()).unwrap();
        let again = Standardizer::fit(&tr.inputs);
        for j in 0..5 {
            assert!(again.mean[j].abs() < 1e-10);
            assert!((again.scale[j].powi(2) - 1.0).abs() < 1e-10);
        }
        // idempotent on standardized data
        let (tr2, _, _) = standardize(&tr, &tr.clone()).unwrap();
        for (a, b) in tr.inputs.data().iter().zip(tr2.inputs.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn test_split_uses_train_statistics() {
        let train = gen_blobs(2, 50, 3, 0.5, 2).unwrap();
        let shifted = Tensor::new(
            train.inputs.shape().to_vec(),
            train.inputs.data().iter().map(|v| v + 3.0).collect(),
        )
        .unwrap();
        let test = Dataset { split: Split::Test, ..train.with_inputs(shifted).unwrap() };
        let (_, te, _) = standardize(&train, &test).unwrap();
        let test_mean = Standardizer::fit(&te.inputs).mean;
        assert!(test_mean.iter().all(|m| m.abs() > 0.5));
    }

    #[test]
    fn validation_rejects_bad_data() {
        let rows = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert!(Dataset::new(rows.clone(), vec![0], 2, Split::Test, "x").is_err());
        assert!(Dataset::new(rows.clone(), vec![0, 2], 2, Split::Test, "x").is_err());
        // class 1 missing from the training split
        assert!(Dataset::new(rows.clone(), vec![0, 0], 2, Split::Train, "x").is_err());
        assert!(Dataset::new(rows, vec![0, 0], 2, Split::Test, "x").is_ok());
        let nan = Tensor::from_rows(&[vec![f64::NAN]]).unwrap();
        assert!(Dataset::new(nan, vec![0], 1, Split::Test, "x").is_err());
    }
}
