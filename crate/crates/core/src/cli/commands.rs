//! Implementations of the subcommands.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::output::{ndjson_line, NdjsonWriter, Staging};
use super::{
    Axis, CliError, CliResult, CorruptEvalArgs, EmbedArgs, EvalArgs, Settings, SplitArg, SweepArgs, TrainArgs,
    METRICS_SCHEMA, SWEEP_SCHEMA, THREADS_ENV,
};
use crate::checkpoint::Checkpoint;
use crate::data::{write_csv, Dataset, Standardizer};
use crate::error::Error;
use crate::eval::robustness_report;
use crate::experiment::DatasetSpec;
use crate::model::ModelParams;
use crate::train::{embed as embed_split, evaluate, primary_classifier, probe_accuracy, train_with, KSpec, LossKind, TrainConfig};

/// Final accuracies of a model, printed by `train` and `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema: String,
    pub command: String,
    pub dataset: String,
    pub loss: LossKind,
    pub seed: u64,
    pub epochs: usize,
    pub k: KSpec,
    pub alpha: f64,
    pub d: usize,
    pub knn1_accuracy: f64,
    pub knn10_accuracy: f64,
    pub argmax_accuracy: Option<f64>,
    /// Accuracy of the primary decision rule: argmax for cross-entropy,
    /// 10-NN for embeddings.
    pub test_accuracy: f64,
    /// 1-NN probe accuracy, as logged during training.
    pub probe_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub schema: String,
    pub axis: String,
    pub value: serde_json::Value,
    pub test_accuracy: f64,
    pub seed: u64,
}

/// Library errors caused by bad input map to exit code 2, everything else to 1.
fn classify(e: Error) -> CliError {
    match e {
        Error::Config(_) | Error::KOutOfRange { .. } | Error::InvalidArgument(_) => CliError::usage(e),
        other => CliError::runtime(other),
    }
}

fn io_error(context: String) -> impl FnOnce(std::io::Error) -> CliError {
    move |e| CliError::runtime(anyhow::Error::new(e).context(context))
}

fn print_line<T: Serialize>(record: &T) -> CliResult<()> {
    println!("{}", ndjson_line(record).map_err(CliError::runtime)?);
    Ok(())
}

fn merged_settings(config: Option<&Path>, flags: Settings) -> CliResult<Settings> {
    let base = match config {
        Some(path) => Settings::from_file(path).map_err(classify)?,
        None => Settings::default(),
    };
    Ok(flags.over(base))
}

fn dataset_name(spec: &DatasetSpec) -> &'static str {
    match spec {
        DatasetSpec::Blobs { .. } => "blobs",
        DatasetSpec::Multicluster { .. } => "multicluster",
        DatasetSpec::Csv { .. } => "csv",
        DatasetSpec::Idx { .. } => "idx",
    }
}

struct Prepared {
    spec: DatasetSpec,
    seed: u64,
    train: Dataset,
    test: Dataset,
    stats: Standardizer,
}

fn prepare(settings: &Settings) -> CliResult<Prepared> {
    let spec = settings.dataset_spec().map_err(classify)?;
    let seed = settings.seed();
    let (train, test, stats) = spec.load(seed).map_err(classify)?;
    Ok(Prepared { spec, seed, train, test, stats })
}

fn config_for(settings: &Settings, data: &Prepared) -> CliResult<TrainConfig> {
    let cfg = settings.train_config(data.train.input_dim(), data.train.num_classes).map_err(classify)?;
    cfg.check_dataset(&data.train).map_err(classify)?;
    Ok(cfg)
}

fn metrics(
    command: &str,
    spec: &DatasetSpec,
    cfg: &TrainConfig,
    params: &ModelParams,
    train: &Dataset,
    test: &Dataset,
) -> crate::Result<MetricsRecord> {
    let m = evaluate(params, cfg.loss_kind, train, test)?;
    Ok(MetricsRecord {
        schema: METRICS_SCHEMA.into(),
        command: command.into(),
        dataset: dataset_name(spec).into(),
        loss: cfg.loss_kind,
        seed: cfg.seed,
        epochs: cfg.epochs,
        k: cfg.k,
        alpha: cfg.alpha,
        d: cfg.model.output_dim,
        knn1_accuracy: m.knn1_accuracy,
        knn10_accuracy: m.knn10_accuracy,
        argmax_accuracy: m.argmax_accuracy,
        test_accuracy: m.primary(),
        probe_accuracy: probe_accuracy(params, train, test)?,
    })
}

/// Trains one model, streaming `run.ndjson` into `dir` and saving
/// `checkpoint.json` at every probe and at the end.
fn run_training(dir: &Path, cfg: &TrainConfig, data: &Prepared) -> CliResult<ModelParams> {
    let mut log = NdjsonWriter::create(&dir.join("run.ndjson")).map_err(io_error(format!("{}", dir.display())))?;
    let ckpt_path = dir.join("checkpoint.json");
    let save = |params: &ModelParams, epochs: usize| {
        Checkpoint::new(cfg.clone(), data.spec.clone(), data.seed, data.stats.clone(), epochs, params.clone()).save(&ckpt_path)
    };
    let (params, _) = train_with(cfg, &data.train, &data.test, |record, params| {
        log.write(record)?;
        if record.eval_accuracy.is_some() {
            save(params, record.epoch + 1)?;
        }
        Ok(())
    })
    .map_err(|e| match e {
        e @ Error::Divergence { .. } => CliError::runtime(e),
        other => classify(other),
    })?;
    save(&params, cfg.epochs).map_err(CliError::runtime)?;
    Ok(params)
}

pub fn train(args: TrainArgs) -> CliResult<()> {
    let settings = merged_settings(args.config.as_deref(), args.settings)?;
    let data = prepare(&settings)?;
    let cfg = config_for(&settings, &data)?;
    let out = settings.out_dir();
    let staging = Staging::new(&out).map_err(io_error(format!("cannot create output directory {}", out.display())))?;
    let params = run_training(staging.dir(), &cfg, &data)?;
    let record = metrics("train", &data.spec, &cfg, &params, &data.train, &data.test).map_err(CliError::runtime)?;
    let mut writer =
        NdjsonWriter::create(&staging.dir().join("metrics.ndjson")).map_err(io_error("metrics.ndjson".into()))?;
    writer.write(&record).map_err(CliError::runtime)?;
    staging.commit().map_err(io_error(format!("cannot write {}", out.display())))?;
    print_line(&record)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(CliError::runtime)
}

/// Writes a single NDJSON record to `dir/name` through a staging directory.
fn write_single<T: Serialize>(dir: &Path, name: &str, record: &T) -> CliResult<()> {
    let staging = Staging::new(dir).map_err(io_error(format!("cannot create output directory {}", dir.display())))?;
    NdjsonWriter::create(&staging.dir().join(name))
        .and_then(|mut w| w.write(record))
        .map_err(io_error(name.into()))?;
    staging.commit().map_err(io_error(format!("cannot write {}", dir.display())))
}

pub fn eval(args: EvalArgs) -> CliResult<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let (train, test) = ckpt.datasets().map_err(CliError::runtime)?;
    let record = metrics("eval", &ckpt.dataset, &ckpt.config, &ckpt.params, &train, &test).map_err(CliError::runtime)?;
    if let Some(dir) = &args.out {
        write_single(dir, "eval.ndjson", &record)?;
    }
    print_line(&record)
}

fn parse_point(axis: Axis, raw: &str, base: &Settings) -> CliResult<(Settings, serde_json::Value)> {
    let bad = |e: String| CliError::usage(anyhow!("invalid {} value '{raw}': {e}", axis.name()));
    let raw = raw.trim();
    let mut s = base.clone();
    s.k = None;
    s.d = None;
    s.alpha = None;
    let value = match axis {
        Axis::K => {
            let k: KSpec = raw.parse().map_err(|e: Error| bad(e.to_string()))?;
            s.k = Some(k);
            serde_json::to_value(k).map_err(CliError::runtime)?
        }
        Axis::D => {
            let d: usize = raw.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
            s.d = Some(d);
            d.into()
        }
        Axis::Alpha => {
            let a: f64 = raw.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
            s.alpha = Some(a);
            a.into()
        }
    };
    Ok((s, value))
}

fn sweep_threads() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::usage(anyhow!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
    }
}

pub fn sweep(args: SweepArgs) -> CliResult<()> {
    let settings = merged_settings(args.config.as_deref(), args.settings)?;
    let data = prepare(&settings)?;
    let mut points = Vec::with_capacity(args.values.len());
    for raw in &args.values {
        let (s, value) = parse_point(args.axis, raw, &settings)?;
        let cfg = config_for(&s, &data)?;
        let label = match &value {
            serde_json::Value::String(s) => s.clone(),
            v => v.to_string(),
        };
        points.push((cfg, value, PathBuf::from("points").join(format!("{}-{label}", args.axis.name()))));
    }

    let out = settings.out_dir();
    let staging = Staging::new(&out).map_err(io_error(format!("cannot create output directory {}", out.display())))?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = sweep_threads()? {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(CliError::runtime)?;
    let root = staging.dir().to_path_buf();
    let results: Vec<CliResult<SweepRecord>> = pool.install(|| {
        points
            .par_iter()
            .map(|(cfg, value, rel)| {
                let dir = root.join(rel);
                std::fs::create_dir_all(&dir).map_err(io_error(format!("{}", dir.display())))?;
                let params = run_training(&dir, cfg, &data)?;
                let m = evaluate(&params, cfg.loss_kind, &data.train, &data.test).map_err(CliError::runtime)?;
                Ok(SweepRecord {
                    schema: SWEEP_SCHEMA.into(),
                    axis: args.axis.name().into(),
                    value: value.clone(),
                    test_accuracy: m.primary(),
                    seed: cfg.seed,
                })
            })
            .collect()
    });
    let records = results.into_iter().collect::<CliResult<Vec<_>>>()?;
    let mut writer = NdjsonWriter::create(&root.join("sweep.ndjson")).map_err(io_error("sweep.ndjson".into()))?;
    for r in &records {
        writer.write(r).map_err(CliError::runtime)?;
    }
    drop(writer);
    staging.commit().map_err(io_error(format!("cannot write {}", out.display())))?;
    for r in &records {
        print_line(r)?;
    }
    Ok(())
}

pub fn corrupt_eval(args: CorruptEvalArgs) -> CliResult<()> {
    let method = load_checkpoint(&args.checkpoint)?;
    let baseline = load_checkpoint(&args.baseline)?;
    if method.dataset != baseline.dataset || method.data_seed != baseline.data_seed {
        return Err(CliError::runtime(anyhow!(
            "{} and {} were trained on different data",
            args.checkpoint.display(),
            args.baseline.display()
        )));
    }
    let (train, test) = method.datasets().map_err(CliError::runtime)?;
    let (base_train, _) = baseline.datasets().map_err(CliError::runtime)?;
    let m = primary_classifier(&method.params, method.config.loss_kind, &train).map_err(CliError::runtime)?;
    let b = primary_classifier(&baseline.params, baseline.config.loss_kind, &base_train).map_err(CliError::runtime)?;
    let seed = args.seed.unwrap_or(method.config.seed);
    let report = robustness_report(&m, &b, &test, seed).map_err(CliError::runtime)?;
    if let Some(dir) = &args.out {
        write_single(dir, "robustness.ndjson", &report)?;
    }
    print_line(&report)
}

pub fn embed(args: EmbedArgs) -> CliResult<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let (train, test) = ckpt.datasets().map_err(CliError::runtime)?;
    let ds = match args.split {
        SplitArg::Train => train,
        SplitArg::Test => test,
    };
    let embedded = embed_split(&ckpt.params, &ds).and_then(|e| ds.with_inputs(e)).map_err(CliError::runtime)?;
    let staging =
        Staging::new(&args.out).map_err(io_error(format!("cannot create output directory {}", args.out.display())))?;
    write_csv(&staging.dir().join("embeddings.csv"), &embedded)
        .context("embeddings.csv")
        .map_err(CliError::runtime)?;
    staging.commit().map_err(io_error(format!("cannot write {}", args.out.display())))
}
