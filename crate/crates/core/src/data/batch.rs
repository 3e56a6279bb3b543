use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
    /// Spread every class evenly over the epoch so each batch sees at least
    /// two classes.
    pub stratified: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

/// Splits one epoch's permutation of `ds` into batches of `plan.batch_size`.
///
/// The final batch may be shorter; it is dropped when it has a single
/// example. The order depends only on `(plan.seed, epoch)`.
pub fn make_batches(ds: &Dataset, plan: &BatchPlan, epoch: usize) -> Result<Vec<Batch>> {
    if plan.batch_size < 2 {
        return Err(Error::InvalidArgument(format!("batch size must be >= 2, got {}", plan.batch_size)));
    }
    let mut rng = rng::epoch_stream(plan.seed, streams::BATCHES, epoch);
    let order = if plan.stratified {
        stratified_order(&ds.labels, ds.num_classes, &mut rng)
    } else {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);
        order
    };
    let mut groups: Vec<Vec<usize>> = order.chunks(plan.batch_size).map(<[usize]>::to_vec).collect();
    if groups.last().is_some_and(|g| g.len() < 2) {
        groups.pop();
    }
    if plan.stratified {
        repair_single_class(&mut groups, &ds.labels);
    }
    Ok(groups
        .into_iter()
        .map(|indices| Batch {
            inputs: ds.inputs.select_rows(&indices),
            labels: indices.iter().map(|&i| ds.labels[i]).collect(),
            indices,
        })
        .collect())
}

/// Orders examples by their relative position within their own shuffled
/// class, offset by a random phase per class, so every window of the result
/// holds each class in roughly its overall proportion.
fn stratified_order(labels: &[usize], num_classes: usize, rng: &mut rng::Rng) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(labels.len());
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(rng);
        let phase: f64 = rng.random();
        let n = members.len() as f64;
        for (j, &i) in members.iter().enumerate() {
            keyed.push(((j as f64 + phase) / n, c, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, _, i)| i).collect()
}

fn distinct_classes(group: &[usize], labels: &[usize]) -> usize {
    let mut seen: Vec<usize> = group.iter().map(|&i| labels[i]).collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// Swaps examples between batches until no batch is single-class, where the
/// class counts allow it.
fn repair_single_class(groups: &mut [Vec<usize>], labels: &[usize]) {
    for b in 0..groups.len() {
        if distinct_classes(&groups[b], labels) != 1 {
            continue;
        }
        let class = labels[groups[b][0]];
        'search: for other in 0..groups.len() {
            if other == b {
                continue;
            }
            for pos in 0..groups[other].len() {
                let candidate = groups[other][pos];
                if labels[candidate] == class {
                    continue;
                }
                let keeps_two = groups[other]
                    .iter()
                    .enumerate()
                    .any(|(p, &i)| p != pos && labels[i] != class);
                if keeps_two {
                    let mine = groups[b][0];
                    groups[b][0] = candidate;
                    groups[other][pos] = mine;
                    break 'search;
                }
            }
        }
    }
}
