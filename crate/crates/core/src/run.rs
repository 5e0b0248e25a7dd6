//! Training, evaluation and ablation drivers shared by the command line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use thiserror::Error;

use crate::config::{ConfigError, DataSource, RunConfig};
use crate::data::{generate_dataset, load_directory_dataset, write_directory_dataset, DataError, Dataset, SkipReport};
use crate::metrics::{softmax_rows, MetricsError, MetricsReport};
use crate::model::{Adam, Checkpoint, ModelError, Variant, Wglin};
use crate::tensor::TensorError;

pub const CHECKPOINT_FILE: &str = "model.wgln";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";
pub const ABLATION_FILE: &str = "ablation.csv";
/// Environment variable capping the evaluation worker count.
pub const THREADS_ENV: &str = "WGLIN_THREADS";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
}

impl RunError {
    /// 2 for configuration problems, 3 for data problems, 4 for numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Model(e) => match e {
                ModelError::Config(_) | ModelError::Variant(_) | ModelError::ConfigMismatch(_) => 2,
                ModelError::NonFiniteLoss { .. } | ModelError::Tensor(TensorError::NonFinite { .. }) => 4,
                _ => 3,
            },
            RunError::Data(_) | RunError::Metrics(_) | RunError::Io { .. } => 3,
        }
    }
}

impl From<TensorError> for RunError {
    fn from(e: TensorError) -> Self {
        RunError::Model(e.into())
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> RunError {
    let context = context.into();
    move |source| RunError::Io { context, source }
}

pub type Result<T> = std::result::Result<T, RunError>;

/// Worker count from `WGLIN_THREADS`, default 1.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// Training and test datasets named by the config, plus any samples skipped
/// while loading a directory.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset, SkipReport)> {
    match &cfg.data {
        DataSource::Synthetic => {
            let (train, test) = generate_dataset(&cfg.synth_spec(), cfg.n_per_class, cfg.split_ratio);
            Ok((train, test, SkipReport::default()))
        }
        DataSource::Directory(root) => {
            let (train, mut report) = load_directory_dataset(root, "train", cfg.model.views)?;
            let (test, r2) = load_directory_dataset(root, "test", cfg.model.views)?;
            report.skipped.extend(r2.skipped);
            Ok((train, test, report))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub classes: usize,
    /// `[n × classes]`, row-major.
    pub logits: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Predictions {
    pub fn probabilities(&self) -> Vec<f64> {
        softmax_rows(&self.logits, self.classes)
    }

    pub fn accuracy(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        let hits = self
            .logits
            .chunks(self.classes)
            .zip(&self.labels)
            .filter(|(row, &y)| crate::metrics::argmax(row) == y)
            .count();
        hits as f64 / self.labels.len() as f64
    }

    pub fn report(&self) -> Result<MetricsReport> {
        Ok(MetricsReport::from_probabilities(&self.probabilities(), &self.labels, self.classes)?)
    }
}

/// Fused logits for every sample, batched in dataset order. Batches are
/// spread over `threads` scoped workers and merged in order, so the result
/// does not depend on the worker count.
pub fn predict_dataset(model: &Wglin, data: &Dataset, batch_size: usize, threads: usize) -> Result<Predictions> {
    let n = data.len();
    let batch_size = batch_size.max(1);
    let batches: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(batch_size).map(<[usize]>::to_vec).collect();
    let run = |chunk: &[Vec<usize>]| -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for idx in chunk {
            let batch = data.batch(idx)?;
            out.extend_from_slice(model.predict(&batch)?.data());
        }
        Ok(out)
    };
    let workers = threads.clamp(1, batches.len().max(1));
    let logits = if workers == 1 {
        run(&batches)?
    } else {
        let per = batches.len().div_ceil(workers);
        let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
            let handles: Vec<_> = batches.chunks(per).map(|c| s.spawn(move || run(c))).collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        });
        let mut all = Vec::with_capacity(n * model.config.num_classes);
        for p in parts {
            all.extend(p?);
        }
        all
    };
    Ok(Predictions { classes: model.config.num_classes, logits, labels: data.labels() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean training loss over the epoch.
    pub loss: f64,
    /// Accuracy on the full training set after the epoch.
    pub train_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Sample order for one epoch: a Fisher–Yates shuffle keyed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

/// Runs `cfg.epochs` epochs of Adam. `on_epoch` sees each finished epoch
/// and may stop training early.
pub fn train_model(
    model: &mut Wglin,
    adam: &mut Adam,
    train: &Dataset,
    cfg: &RunConfig,
    threads: usize,
    mut on_epoch: impl FnMut(&EpochRecord, &Wglin, &Adam) -> Result<Control>,
) -> Result<Vec<EpochRecord>> {
    let mut records = Vec::new();
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch = train.batch(idx)?;
            let (loss, _) = model.train_step(adam, &batch)?;
            loss_sum += loss * idx.len() as f64;
        }
        let train_acc = predict_dataset(model, train, cfg.batch_size, threads)?.accuracy();
        let record = EpochRecord { epoch, loss: loss_sum / train.len().max(1) as f64, train_acc };
        info!("epoch {epoch}: loss {:.6}, train_acc {:.4}", record.loss, record.train_acc);
        let control = on_epoch(&record, model, adam)?;
        records.push(record);
        if control == Control::Stop {
            break;
        }
    }
    Ok(records)
}

pub fn format_train_log(records: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,loss,train_acc\n");
    for r in records {
        let _ = writeln!(s, "{},{:?},{:?}", r.epoch, r.loss, r.train_acc);
    }
    s
}

pub fn parse_train_log(text: &str) -> std::result::Result<Vec<EpochRecord>, String> {
    let mut lines = text.lines();
    if lines.next() != Some("epoch,loss,train_acc") {
        return Err("missing train log header".into());
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            match f.as_slice() {
                [e, loss, acc] => Ok(EpochRecord {
                    epoch: e.parse().map_err(|_| format!("bad epoch in {l:?}"))?,
                    loss: loss.parse().map_err(|_| format!("bad loss in {l:?}"))?,
                    train_acc: acc.parse().map_err(|_| format!("bad accuracy in {l:?}"))?,
                }),
                _ => Err(format!("bad train log row {l:?}")),
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
}

/// Trains per `cfg` and writes the checkpoint, the per-epoch log and the
/// resolved config into `out`. The checkpoint and log are rewritten after
/// every epoch, so a numeric failure leaves the last good epoch on disk.
pub fn cmd_train(
    cfg: &RunConfig,
    out: &Path,
    mut on_epoch: impl FnMut(&EpochRecord, &Wglin) -> Result<Control>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(format!("creating {}", out.display())))?;
    fs::write(out.join(RESOLVED_CONFIG_FILE), cfg.to_text()).map_err(io_err("writing resolved config"))?;
    let (train, _, report) = load_datasets(cfg)?;
    if !report.is_empty() {
        warn!("{report}");
    }
    let mut model = Wglin::new(cfg.model.clone(), cfg.variant, cfg.seed)?;
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(TRAIN_LOG_FILE);
    let mut done: Vec<EpochRecord> = Vec::new();
    let threads = threads_from_env();
    let records = train_model(&mut model, &mut adam, &train, cfg, threads, |r, m, a| {
        Checkpoint::capture(m, Some(a)).save(&ckpt_path)?;
        done.push(r.clone());
        fs::write(&log_path, format_train_log(&done)).map_err(io_err("writing train log"))?;
        on_epoch(r, m)
    })?;
    if records.is_empty() {
        Checkpoint::capture(&model, Some(&adam)).save(&ckpt_path)?;
        fs::write(&log_path, format_train_log(&records)).map_err(io_err("writing train log"))?;
    }
    Ok(TrainSummary { records, checkpoint: ckpt_path })
}

/// What to evaluate on.
#[derive(Clone, Debug, PartialEq)]
pub enum EvalData {
    SyntheticTrain,
    SyntheticTest,
    /// A dataset root; its `test` split is used.
    Directory(PathBuf),
}

impl std::str::FromStr for EvalData {
    type Err = ConfigError;

    fn from_str(s: &str) -> std::result::Result<Self, ConfigError> {
        match s {
            "synthetic:train" => Ok(Self::SyntheticTrain),
            "synthetic:test" | "synthetic" => Ok(Self::SyntheticTest),
            "" => Err(ConfigError::Invalid("empty data source".into())),
            path => Ok(Self::Directory(PathBuf::from(path))),
        }
    }
}

pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Wglin> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut model = Wglin::new(cfg.model.clone(), cfg.variant, cfg.seed)?;
    ckpt.restore(&mut model, None)?;
    Ok(model)
}

/// Evaluates a checkpoint. The report is a pure function of the checkpoint,
/// config and data.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: &EvalData) -> Result<(MetricsReport, Predictions)> {
    let model = load_model(cfg, checkpoint)?;
    let dataset = match data {
        EvalData::SyntheticTrain => generate_dataset(&cfg.synth_spec(), cfg.n_per_class, cfg.split_ratio).0,
        EvalData::SyntheticTest => generate_dataset(&cfg.synth_spec(), cfg.n_per_class, cfg.split_ratio).1,
        EvalData::Directory(root) => {
            let (d, report) = load_directory_dataset(root, "test", cfg.model.views)?;
            if !report.is_empty() {
                warn!("{report}");
            }
            d
        }
    };
    if dataset.is_empty() {
        return Err(MetricsError::EmptyConfusion.into());
    }
    let first = dataset.sample(0);
    let m = &cfg.model;
    if (first.height, first.width, first.image_channels, first.lesion_channels)
        != (m.height, m.width, m.image_channels, m.lesion_channels)
    {
        return Err(ModelError::ConfigMismatch(format!(
            "data is {}x{} with {}+{} channels, checkpoint expects {}x{} with {}+{}",
            first.height,
            first.width,
            first.image_channels,
            first.lesion_channels,
            m.height,
            m.width,
            m.image_channels,
            m.lesion_channels
        ))
        .into());
    }
    let preds = predict_dataset(&model, &dataset, cfg.batch_size, threads_from_env())?;
    Ok((preds.report()?, preds))
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: MetricsReport,
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,acc,prec,spec,kappa,f1\n");
    for r in rows {
        let p = &r.report;
        let _ = writeln!(
            s,
            "{},{:.2},{:.2},{:.2},{:.2},{:.2}",
            r.variant,
            100.0 * p.accuracy,
            100.0 * p.macro_precision,
            100.0 * p.macro_specificity,
            100.0 * p.kappa,
            100.0 * p.macro_f1
        );
    }
    s
}

/// Trains every variant from the same seed on the same data, evaluates on
/// the test split and writes one row per variant to `out/ablation.csv`.
pub fn cmd_ablate(cfg: &RunConfig, variants: &[Variant], out: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(format!("creating {}", out.display())))?;
    let (train, test, _) = load_datasets(cfg)?;
    let threads = threads_from_env();
    let mut rows = Vec::new();
    for &variant in variants {
        let run = RunConfig { variant, ..cfg.clone() };
        let mut model = Wglin::new(run.model.clone(), variant, run.seed)?;
        let mut adam = Adam::new(&model.params, run.learning_rate);
        train_model(&mut model, &mut adam, &train, &run, threads, |_, _, _| Ok(Control::Continue))?;
        let report = predict_dataset(&model, &test, run.batch_size, threads)?.report()?;
        info!("{variant}: test accuracy {:.4}", report.accuracy);
        rows.push(AblationRow { variant, report });
        fs::write(out.join(ABLATION_FILE), format_ablation(&rows)).map_err(io_err("writing ablation table"))?;
    }
    Ok(rows)
}

/// Writes the synthetic train and test splits as an image directory.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<(usize, usize)> {
    cfg.validate()?;
    let (train, test) = generate_dataset(&cfg.synth_spec(), cfg.n_per_class, cfg.split_ratio);
    write_directory_dataset(out, "train", &train)?;
    write_directory_dataset(out, "test", &test)?;
    Ok((train.len(), test.len()))
}
