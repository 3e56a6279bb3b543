use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

/// Distance between any two cluster centers.
pub const CENTER_DISTANCE: f64 = 2.5;

/// Cluster centers at pairwise distance [`CENTER_DISTANCE`]: scaled basis
/// vectors (a regular simplex) when they fit. Otherwise the centers are
/// evenly spaced around a circle in the first two coordinates (on a line when
/// `dim == 1`), with neighbors on the circle [`CENTER_DISTANCE`] apart.
fn centers(count: usize, dim: usize) -> Vec<Vec<f64>> {
    if count <= dim {
        let radius = CENTER_DISTANCE / std::f64::consts::SQRT_2;
        return (0..count)
            .map(|c| {
                let mut v = vec![0.0; dim];
                v[c] = radius;
                v
            })
            .collect();
    }
    if dim == 1 {
        return (0..count).map(|c| vec![c as f64 * CENTER_DISTANCE]).collect();
    }
    let step = std::f64::consts::TAU / count as f64;
    let radius = CENTER_DISTANCE / (2.0 * (step / 2.0).sin());
    (0..count)
        .map(|c| {
            let mut v = vec![0.0; dim];
            v[0] = radius * (c as f64 * step).cos();
            v[1] = radius * (c as f64 * step).sin();
            v
        })
        .collect()
}

fn split_stream(split: Split) -> u64 {
    match split {
        Split::Train => streams::TRAIN_DATA,
        Split::Test => streams::TEST_DATA,
    }
}

/// Isotropic Gaussian classes around fixed centers.
pub fn gen_blobs(num_classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    generate(num_classes, 1, per_class, dim, spread, seed, Split::Train, "blobs")
}

/// Classes made of several spatially separated Gaussian clusters. Cluster
/// `j` of class `c` is generator cluster `c·clusters_per_class + j`, recorded
/// in [`Dataset::cluster_ids`].
pub fn gen_multicluster(
    num_classes: usize,
    clusters_per_class: usize,
    per_cluster: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    generate(num_classes, clusters_per_class, per_cluster, dim, spread, seed, Split::Train, "multicluster")
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn generate(
    num_classes: usize,
    clusters_per_class: usize,
    per_cluster: usize,
    dim: usize,
    spread: f64,
    seed: u64,
    split: Split,
    name: &str,
) -> Result<Dataset> {
    if num_classes < 2 || clusters_per_class < 1 || per_cluster < 1 || dim < 1 {
        return Err(Error::InvalidArgument(format!(
            "generator needs >= 2 classes and >= 1 cluster, example and dimension \
             (classes {num_classes}, clusters {clusters_per_class}, per cluster {per_cluster}, dim {dim})"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument(format!("spread must be finite and >= 0, got {spread}")));
    }
    // interleave classes along the center list so that neighboring centers
    // belong to different classes
    let all = centers(num_classes * clusters_per_class, dim);
    let mut rng = rng::stream(seed, split_stream(split));
    let total = num_classes * clusters_per_class * per_cluster;
    let mut data = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    let mut cluster_ids = Vec::with_capacity(total);
    for c in 0..num_classes {
        for j in 0..clusters_per_class {
            let cluster = c * clusters_per_class + j;
            let center = &all[j * num_classes + c];
            for _ in 0..per_cluster {
                for &mu in center {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(mu + spread * z);
                }
                labels.push(c);
                cluster_ids.push(cluster);
            }
        }
    }
    let inputs = Tensor::matrix(total, dim, data)?;
    let mut ds = Dataset::new(inputs, labels, num_classes, split, name)?;
    ds.cluster_ids = Some(cluster_ids);
    Ok(ds)
}
