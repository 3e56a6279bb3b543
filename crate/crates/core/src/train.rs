//! Training loop, embedding and evaluation helpers.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::Tape;
use crate::data::{make_batches, BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::eval::{accuracy, argmax_rows, knn_predict, Classifier, EmbeddingIndex};
use crate::loss::{cross_entropy_loss, graph_smoothness_loss, unit_sphere_floor};
use crate::model::{Head, MlpConfig, Mode, ModelParams};
use crate::optim::{OptimConfig, Optimizer};
use crate::tensor::Tensor;

pub const RUN_SCHEMA: &str = "smoothloss.run/1";

/// Losses above this are treated as divergence.
pub const DIVERGENCE_THRESHOLD: f64 = 1e8;

/// Reference points used by the in-training 1-NN probe.
pub const PROBE_REFERENCES: usize = 1000;

/// Initial learning rate of the smoothness protocol.
pub const SMOOTHNESS_LR: f64 = 1e-3;

const EMBED_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[serde(alias = "smooth")]
    GraphSmoothness,
    #[serde(alias = "ce")]
    CrossEntropy,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth" | "graph_smoothness" => Ok(LossKind::GraphSmoothness),
            "ce" | "cross_entropy" => Ok(LossKind::CrossEntropy),
            other => Err(Error::Config(format!("unknown loss '{other}' (smooth, ce)"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::GraphSmoothness => "graph_smoothness",
            LossKind::CrossEntropy => "cross_entropy",
        })
    }
}

/// Neighbor count of the per-batch graph. `Max` connects every vertex to
/// all others in its batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KSpec {
    Max,
    Value(usize),
}

impl KSpec {
    /// Neighbor count for a batch of `n` examples; never more than `n − 1`.
    pub fn resolve(self, n: usize) -> usize {
        let max = n.saturating_sub(1);
        match self {
            KSpec::Max => max,
            KSpec::Value(k) => k.min(max),
        }
    }
}

impl FromStr for KSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "max" {
            return Ok(KSpec::Max);
        }
        s.parse().map(KSpec::Value).map_err(|_| Error::Config(format!("k must be an integer or 'max', got '{s}'")))
    }
}

impl fmt::Display for KSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KSpec::Max => f.write_str("max"),
            KSpec::Value(k) => write!(f, "{k}"),
        }
    }
}

impl Serialize for KSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            KSpec::Max => s.serialize_str("max"),
            KSpec::Value(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for KSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(usize),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(k) => Ok(KSpec::Value(k)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub k: KSpec,
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Embedding dimension `d` is `model.output_dim`.
    pub model: MlpConfig,
    pub seed: u64,
    /// Run the probe every this many epochs (and after the last); 0 disables it.
    pub eval_every: usize,
    pub stratified: bool,
}

impl TrainConfig {
    /// Desk-scale protocol: 50 epochs of batches of 100, SGD with Nesterov
    /// momentum 0.9, lr divided by 10 at the half and three-quarter marks,
    /// weight decay 1e-4, `k = max`, `alpha = 2`, `d = C`.
    ///
    /// The initial lr is 0.1 for cross-entropy and [`SMOOTHNESS_LR`] for the
    /// graph smoothness loss, whose summed kernel over all cross-class pairs
    /// of a batch has gradients a few hundred times larger.
    pub fn protocol(loss_kind: LossKind, input_dim: usize, num_classes: usize) -> TrainConfig {
        let epochs = 50;
        let head = match loss_kind {
            LossKind::GraphSmoothness => Head::L2Normalize,
            LossKind::CrossEntropy => Head::Identity,
        };
        let lr0 = match loss_kind {
            LossKind::GraphSmoothness => SMOOTHNESS_LR,
            LossKind::CrossEntropy => 0.1,
        };
        TrainConfig {
            loss_kind,
            k: KSpec::Max,
            alpha: 2.0,
            epochs,
            batch_size: 100,
            optim: OptimConfig { lr0, milestones: scaled_milestones(epochs), ..OptimConfig::default() },
            model: MlpConfig { input_dim, hidden_dims: vec![64, 64], output_dim: num_classes, head, seed: 0 },
            seed: 0,
            eval_every: 10,
            stratified: true,
        }
    }

    /// Sets the run seed and the model initialization seed together.
    pub fn with_seed(mut self, seed: u64) -> TrainConfig {
        self.seed = seed;
        self.model.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if let KSpec::Value(k) = self.k {
            if k == 0 || k > self.batch_size - 1 {
                return Err(Error::Config(format!(
                    "k = {k} violates 1 <= k <= batch_size - 1 = {}",
                    self.batch_size - 1
                )));
            }
        }
        match self.loss_kind {
            LossKind::GraphSmoothness => {
                if !(self.alpha > 0.0 && self.alpha.is_finite()) {
                    return Err(Error::Config(format!("alpha must be finite and > 0, got {}", self.alpha)));
                }
                if self.model.head == Head::Identity {
                    return Err(Error::Config(
                        "graph smoothness training needs an l2_normalize or batch_norm head".into(),
                    ));
                }
            }
            LossKind::CrossEntropy => {
                if self.model.head != Head::Identity {
                    return Err(Error::Config("cross-entropy training needs the identity head".into()));
                }
            }
        }
        Ok(())
    }

    /// Checks the config against the data it will be trained on.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.input_dim() != self.model.input_dim {
            return Err(Error::Config(format!(
                "model input_dim {} but dataset '{}' has {} features",
                self.model.input_dim,
                ds.name,
                ds.input_dim()
            )));
        }
        if self.loss_kind == LossKind::CrossEntropy && self.model.output_dim != ds.num_classes {
            return Err(Error::Config(format!(
                "cross-entropy needs d = number of classes ({}), got {}",
                ds.num_classes, self.model.output_dim
            )));
        }
        Ok(())
    }

    fn uses_unit_sphere(&self) -> bool {
        self.loss_kind == LossKind::GraphSmoothness && self.model.head == Head::L2Normalize
    }
}

/// Milestones at one half and three quarters of the run.
pub fn scaled_milestones(epochs: usize) -> Vec<usize> {
    let mut m = vec![epochs / 2, (3 * epochs).div_ceil(4)];
    m.dedup();
    m.retain(|&e| e > 0);
    m
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub schema: String,
    pub epoch: usize,
    pub lr: f64,
    /// Mean of the per-batch losses.
    pub train_loss: f64,
    /// Mean per-batch lower bound of the loss on the unit sphere, when it applies.
    pub loss_floor: Option<f64>,
    /// Ordered cross-class neighbor pairs summed over the epoch's batches.
    pub cross_edges: usize,
    pub batches: usize,
    /// 1-NN probe accuracy on the evaluation split, when scheduled.
    pub eval_accuracy: Option<f64>,
    /// Seconds since training started; the only field that varies between
    /// identical runs.
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
}

impl RunLog {
    pub fn last_eval_accuracy(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.eval_accuracy)
    }
}

/// Trains with no per-epoch callback.
pub fn train(config: &TrainConfig, train_ds: &Dataset, eval_ds: &Dataset) -> Result<(ModelParams, RunLog)> {
    train_with(config, train_ds, eval_ds, |_, _| Ok(()))
}

/// Trains and calls `on_epoch` after every epoch with the fresh record and
/// the current parameters.
pub fn train_with<F>(config: &TrainConfig, train_ds: &Dataset, eval_ds: &Dataset, mut on_epoch: F) -> Result<(ModelParams, RunLog)>
where
    F: FnMut(&EpochRecord, &ModelParams) -> Result<()>,
{
    config.validate()?;
    config.check_dataset(train_ds)?;
    config.check_dataset(eval_ds)?;
    let mut params = ModelParams::init(&config.model)?;
    let mut optimizer = Optimizer::new(config.optim.clone(), &params.trainable())?;
    let kinds = params.param_kinds();
    let plan = BatchPlan { seed: config.seed, batch_size: config.batch_size, stratified: config.stratified };
    let started = Instant::now();
    let mut log = RunLog::default();

    for epoch in 0..config.epochs {
        let lr = config.optim.lr_at(epoch);
        let batches = make_batches(train_ds, &plan, epoch)?;
        let (mut loss_sum, mut floor_sum, mut cross_edges) = (0.0, 0.0, 0);
        for (b, batch) in batches.iter().enumerate() {
            let diverged = |loss: f64| Error::Divergence { epoch, batch: b, loss };
            let tape = Tape::new();
            let x = tape.constant(batch.inputs.clone());
            let fwd = params.forward(&tape, x, Mode::Train).map_err(|e| non_finite_as(e, diverged(f64::NAN)))?;
            let loss = match config.loss_kind {
                LossKind::GraphSmoothness => {
                    let k = config.k.resolve(batch.labels.len());
                    graph_smoothness_loss(&tape, fwd.output, &batch.labels, k, config.alpha)
                }
                LossKind::CrossEntropy => cross_entropy_loss(&tape, fwd.output, &batch.labels),
            }
            .map_err(|e| non_finite_as(e, diverged(f64::NAN)))?;
            let value = tape.item(loss.value);
            if !value.is_finite() || value > DIVERGENCE_THRESHOLD {
                return Err(diverged(value));
            }
            tape.backward(loss.value).map_err(|e| non_finite_as(e, diverged(value)))?;
            let grads: Vec<Tensor> = fwd
                .params
                .iter()
                .zip(params.trainable())
                .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            optimizer.step(&mut params.trainable_mut(), &grads, &kinds, lr)?;
            if let Some(stats) = &fwd.batch_stats {
                params.absorb_batch_stats(stats);
            }
            if !params.all_finite() {
                return Err(diverged(value));
            }
            loss_sum += value;
            floor_sum += unit_sphere_floor(loss.cross_edges, config.alpha);
            cross_edges += loss.cross_edges;
        }
        let n = batches.len().max(1) as f64;
        let scheduled = config.eval_every > 0 && ((epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs);
        let eval_accuracy = if scheduled { Some(probe_accuracy(&params, train_ds, eval_ds)?) } else { None };
        let record = EpochRecord {
            schema: RUN_SCHEMA.into(),
            epoch,
            lr,
            train_loss: loss_sum / n,
            loss_floor: config.uses_unit_sphere().then_some(floor_sum / n),
            cross_edges,
            batches: batches.len(),
            eval_accuracy,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record, &params)?;
        log.records.push(record);
    }
    Ok((params, log))
}

/// Mean loss over the batches of `epoch` without updating anything. Uses
/// training-mode batch statistics for the batch-norm head.
pub fn mean_batch_loss(params: &ModelParams, config: &TrainConfig, ds: &Dataset, epoch: usize) -> Result<f64> {
    config.validate()?;
    config.check_dataset(ds)?;
    let plan = BatchPlan { seed: config.seed, batch_size: config.batch_size, stratified: config.stratified };
    let batches = make_batches(ds, &plan, epoch)?;
    let mut total = 0.0;
    for batch in &batches {
        let tape = Tape::new();
        let x = tape.constant(batch.inputs.clone());
        let fwd = params.forward(&tape, x, Mode::Train)?;
        let loss = match config.loss_kind {
            LossKind::GraphSmoothness => {
                let k = config.k.resolve(batch.labels.len());
                graph_smoothness_loss(&tape, fwd.output, &batch.labels, k, config.alpha)?
            }
            LossKind::CrossEntropy => cross_entropy_loss(&tape, fwd.output, &batch.labels)?,
        };
        total += tape.item(loss.value);
    }
    Ok(total / batches.len().max(1) as f64)
}

fn non_finite_as(e: Error, replacement: Error) -> Error {
    match e {
        Error::NonFinite { .. } => replacement,
        other => other,
    }
}

/// Evaluation-mode outputs for every example, computed in chunks.
pub fn embed(params: &ModelParams, ds: &Dataset) -> Result<Tensor> {
    embed_inputs(params, &ds.inputs)
}

pub fn embed_inputs(params: &ModelParams, inputs: &Tensor) -> Result<Tensor> {
    let (n, d) = inputs.require_matrix("embed")?;
    if d != params.input_dim() {
        return Err(Error::shape("embed", format!("{d} features, model expects {}", params.input_dim())));
    }
    let mut data = Vec::with_capacity(n * params.output_dim());
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(EMBED_CHUNK) {
        data.extend_from_slice(params.predict(&inputs.select_rows(chunk))?.data());
    }
    Tensor::matrix(n, params.output_dim(), data)
}

/// 1-NN accuracy on `eval_ds` with the first [`PROBE_REFERENCES`] training
/// examples as references.
pub fn probe_accuracy(params: &ModelParams, train_ds: &Dataset, eval_ds: &Dataset) -> Result<f64> {
    let index = reference_index(params, train_ds)?.truncated(PROBE_REFERENCES);
    let pred = knn_predict(&index, &embed(params, eval_ds)?, 1)?;
    accuracy(&pred, &eval_ds.labels)
}

/// Training-split embeddings as a k-NN reference set.
pub fn reference_index(params: &ModelParams, train_ds: &Dataset) -> Result<EmbeddingIndex> {
    EmbeddingIndex::new(embed(params, train_ds)?, train_ds.labels.clone(), train_ds.num_classes)
}

/// Final test accuracies of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub knn1_accuracy: f64,
    pub knn10_accuracy: f64,
    /// Argmax of the outputs; only for cross-entropy models.
    pub argmax_accuracy: Option<f64>,
}

impl EvalMetrics {
    /// Accuracy of the model's primary decision rule: argmax for logits,
    /// 10-NN for embeddings.
    pub fn primary(&self) -> f64 {
        self.argmax_accuracy.unwrap_or(self.knn10_accuracy)
    }
}

pub fn evaluate(params: &ModelParams, loss_kind: LossKind, train_ds: &Dataset, test_ds: &Dataset) -> Result<EvalMetrics> {
    let index = reference_index(params, train_ds)?;
    let queries = embed(params, test_ds)?;
    let knn = |k: usize| -> Result<f64> { accuracy(&knn_predict(&index, &queries, k.min(index.len()))?, &test_ds.labels) };
    let argmax_accuracy = match loss_kind {
        LossKind::CrossEntropy => Some(accuracy(&argmax_rows(&queries)?, &test_ds.labels)?),
        LossKind::GraphSmoothness => None,
    };
    Ok(EvalMetrics { knn1_accuracy: knn(1)?, knn10_accuracy: knn(10)?, argmax_accuracy })
}

/// The decision rule matching [`EvalMetrics::primary`].
pub fn primary_classifier(params: &ModelParams, loss_kind: LossKind, train_ds: &Dataset) -> Result<Classifier> {
    Ok(match loss_kind {
        LossKind::CrossEntropy => Classifier::Argmax { params: params.clone() },
        LossKind::GraphSmoothness => {
            let index = reference_index(params, train_ds)?;
            let k = 10.min(index.len());
            Classifier::Knn { params: params.clone(), index, k }
        }
    })
}
