//! Contrastive pretraining, supervised fine-tuning, distillation and
//! transfer evaluation.
//!
//! Every procedure is deterministic given its seed. Augmentation draws for
//! image `i` in epoch `e` come from a stream keyed by `(e, i)`, so they do
//! not depend on batch composition.

mod losses;
mod metrics;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{make_view_pair, AugmentPipeline, FloatImage};
use crate::dataio::{split_and_subsample, Checkpoint, ImageDataset, LabelBudget, Partition, IMAGE_SIDE};
use crate::nets::{parse_descriptor, HeadKind, Mode, ModelAssembly, DEFAULT_DENSE_HIDDEN};
use crate::tensor::{SgdHyper, Tape, Tensor};
use crate::{Error, Result, RngStream};

pub use losses::{argmax_rows, cross_entropy, distillation_loss, nt_xent_loss, nt_xent_value};
pub use metrics::{MetricRecord, RunMetrics, CSV_HEADER};

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastConfig {
    pub temperature: f64,
    /// Source images per step; the loss sees twice as many views.
    pub batch_size: usize,
    pub optimizer: SgdHyper,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self { temperature: 1.0, batch_size: 64, optimizer: SgdHyper::default() }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.batch_size < 2 {
            return Err(Error::config("contrastive batch_size must be at least 2"));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    LinearProbe,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierHead {
    Linear,
    /// Affine, ReLU, affine with a 64-wide hidden layer.
    Dense,
}

impl ClassifierHead {
    pub fn kind(self, classes: usize) -> HeadKind {
        match self {
            ClassifierHead::Linear => HeadKind::Linear { classes },
            ClassifierHead::Dense => HeadKind::Dense { hidden: DEFAULT_DENSE_HIDDEN, classes },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub head: ClassifierHead,
    pub batch_size: usize,
    pub optimizer: SgdHyper,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { mode: FinetuneMode::LinearProbe, head: ClassifierHead::Linear, batch_size: 64, optimizer: SgdHyper::default() }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Weight on ground-truth cross-entropy; 0 trains on teacher logits alone.
    pub alpha: f64,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    /// Augment distillation batches with the run's pipeline.
    pub augment: bool,
    pub optimizer: SgdHyper,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            alpha: 0.0,
            early_stop_patience: 10,
            batch_size: 64,
            augment: false,
            optimizer: SgdHyper::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!("distillation temperature must be positive, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        self.optimizer.validate()
    }
}

/// Index sets a supervised stage trains, monitors and reports on.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DataSplits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl From<&Partition> for DataSplits {
    fn from(p: &Partition) -> Self {
        Self { train: p.labeled.clone(), val: p.val.clone(), test: p.test.clone() }
    }
}

/// A trained model with its measurements and optimizer step count.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub model: ModelAssembly,
    pub metrics: RunMetrics,
    pub steps: u64,
}

impl Outcome {
    pub fn checkpoint(&self) -> Checkpoint {
        self.model.to_checkpoint(self.steps, &self.metrics.fingerprint)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes absent from the evaluated split.
    pub per_class: Vec<Option<f64>>,
    pub predictions: Vec<usize>,
}

/// Top-1 accuracy of `logits` against `labels`, ties to the lowest class.
pub fn evaluate_logits(logits: &Tensor, labels: &[usize], classes: usize) -> Evaluation {
    let predictions = argmax_rows(logits);
    let mut hits = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        seen[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    let total: usize = seen.iter().sum();
    let accuracy = if total == 0 { 0.0 } else { hits.iter().sum::<usize>() as f64 / total as f64 };
    let per_class = hits.iter().zip(&seen).map(|(&h, &s)| (s > 0).then(|| h as f64 / s as f64)).collect();
    Evaluation { accuracy, per_class, predictions }
}

/// Stacks images as an N×3×32×32 batch, optionally augmenting image `i`
/// with `stream.fork(i)`.
pub fn image_batch(ds: &ImageDataset, indices: &[usize], aug: Option<(&AugmentPipeline, &RngStream)>) -> Result<Tensor> {
    let mut data = Vec::with_capacity(indices.len() * 3 * IMAGE_SIDE * IMAGE_SIDE);
    for &i in indices {
        let img = FloatImage::from_bytes(IMAGE_SIDE, IMAGE_SIDE, ds.image(i))?;
        match aug {
            Some((p, s)) if !p.is_empty() => p.apply(&img, &mut s.fork(i as u64)).write_chw(&mut data),
            _ => img.write_chw(&mut data),
        }
    }
    Tensor::from_vec(&[indices.len(), 3, IMAGE_SIDE, IMAGE_SIDE], data)
}

/// Interleaved view pairs: `x1` of image `indices[k]` at row `2k`, `x2` at
/// row `2k + 1`.
pub fn view_batch(ds: &ImageDataset, indices: &[usize], pipeline: &AugmentPipeline, stream: &RngStream) -> Result<Tensor> {
    let mut data = Vec::with_capacity(2 * indices.len() * 3 * IMAGE_SIDE * IMAGE_SIDE);
    for &i in indices {
        let img = FloatImage::from_bytes(IMAGE_SIDE, IMAGE_SIDE, ds.image(i))?;
        let pair = make_view_pair(&img, pipeline, &stream.fork(i as u64), i);
        pair.x1.write_chw(&mut data);
        pair.x2.write_chw(&mut data);
    }
    Tensor::from_vec(&[2 * indices.len(), 3, IMAGE_SIDE, IMAGE_SIDE], data)
}

fn labels_of(ds: &ImageDataset, indices: &[usize]) -> Vec<usize> {
    indices.iter().map(|&i| ds.label(i)).collect()
}

fn shuffled(indices: &[usize], root: &RngStream, epoch: usize) -> Vec<usize> {
    let mut order = indices.to_vec();
    order.shuffle(&mut root.fork_named("order").fork(epoch as u64));
    order
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let cols = t.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
    }
    Tensor::from_vec(&[rows.len(), cols], data)
}

fn chunked(indices: &[usize], f: impl Fn(&[usize]) -> Result<Tensor>) -> Result<Tensor> {
    let mut parts = Vec::new();
    for chunk in indices.chunks(EVAL_CHUNK) {
        parts.push(f(chunk)?);
    }
    if parts.is_empty() {
        return Err(Error::contract("nothing to evaluate"));
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tape::new().concat_rows(&refs)
}

/// Evaluation-mode model output for every index.
pub fn predict(model: &ModelAssembly, ds: &ImageDataset, indices: &[usize]) -> Result<Tensor> {
    chunked(indices, |c| model.infer(&image_batch(ds, c, None)?))
}

/// Encoder features for every index, evaluation mode.
pub fn encode(model: &ModelAssembly, ds: &ImageDataset, indices: &[usize]) -> Result<Tensor> {
    chunked(indices, |c| model.features(&image_batch(ds, c, None)?))
}

pub fn evaluate(model: &ModelAssembly, ds: &ImageDataset, indices: &[usize]) -> Result<Evaluation> {
    let classes = model.classes().ok_or_else(|| Error::contract("evaluate needs a classifier head"))?;
    let logits = predict(model, ds, indices)?;
    Ok(evaluate_logits(&logits, &labels_of(ds, indices), classes))
}

fn step_budget(hyper: &SgdHyper) -> usize {
    hyper.iterations.unwrap_or(usize::MAX)
}

/// Contrastive pretraining of `model` (which must carry a projection head)
/// on view pairs of `indices`.
pub fn pretrain(
    mut model: ModelAssembly,
    ds: &ImageDataset,
    indices: &[usize],
    pipeline: &AugmentPipeline,
    cfg: &ContrastConfig,
    seed: u64,
    fingerprint: &str,
) -> Result<Outcome> {
    cfg.validate()?;
    if !matches!(model.head.as_ref().map(|h| h.kind()), Some(HeadKind::Projection { .. })) {
        return Err(Error::contract("pretraining needs a projection head"));
    }
    if indices.len() < 2 {
        return Err(Error::config("pretraining needs at least two images"));
    }
    let started = Instant::now();
    let root = RngStream::new(seed).fork_named("pretrain");
    let mut metrics = RunMetrics::new(seed, fingerprint);
    let mut state = model.optimizer_state();
    let budget = step_budget(&cfg.optimizer);
    let mut steps = 0usize;
    for epoch in 0..cfg.optimizer.epochs {
        let views = root.fork_named("views").fork(epoch as u64);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in shuffled(indices, &root, epoch).chunks(cfg.batch_size) {
            if chunk.len() < 2 || steps >= budget {
                continue;
            }
            let mut step = || -> Result<f64> {
                let x = view_batch(ds, chunk, pipeline, &views)?;
                let mut tape = Tape::new();
                let pass = model.forward(&mut tape, &x, Mode::Train)?;
                let loss = nt_xent_loss(&mut tape, &pass.output, cfg.temperature)?;
                let grads = tape.backward(&loss)?;
                model.apply_step(&pass, &grads, &mut state, &cfg.optimizer)?;
                Ok(loss.item()? as f64)
            };
            total += step().map_err(|e| e.at_step("pretrain", steps))?;
            count += 1;
            steps += 1;
        }
        if count > 0 {
            metrics.epoch(epoch, "train", "loss", total / count as f64);
        }
    }
    metrics.final_value("train", "steps", steps as f64);
    metrics.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(Outcome { model, metrics, steps: steps as u64 })
}

/// Builds a classifier on top of the encoder stored in `encoder` and trains
/// it on `splits.train`.
pub fn finetune(
    encoder: &Checkpoint,
    ds: &ImageDataset,
    splits: &DataSplits,
    pipeline: &AugmentPipeline,
    cfg: &FinetuneConfig,
    seed: u64,
    fingerprint: &str,
) -> Result<Outcome> {
    let arch = parse_descriptor(&encoder.descriptor)?.encoder;
    let head = cfg.head.kind(ds.num_classes());
    let mut model = ModelAssembly::build(arch, Some(head), cfg.mode == FinetuneMode::LinearProbe, seed)?;
    model.load_encoder(encoder)?;
    train_classifier(model, ds, splits, pipeline, cfg, seed, fingerprint)
}

/// Supervised cross-entropy training of an assembled classifier. Training
/// batches pass through `pipeline`; evaluation never does.
pub fn train_classifier(
    mut model: ModelAssembly,
    ds: &ImageDataset,
    splits: &DataSplits,
    pipeline: &AugmentPipeline,
    cfg: &FinetuneConfig,
    seed: u64,
    fingerprint: &str,
) -> Result<Outcome> {
    cfg.validate()?;
    if splits.train.is_empty() {
        return Err(Error::config("fine-tuning needs a non-empty labeled set"));
    }
    let classes = model.classes().ok_or_else(|| Error::contract("fine-tuning needs a classifier head"))?;
    if classes != ds.num_classes() {
        return Err(Error::config(format!("head has {classes} classes, dataset {} has {}", ds.name(), ds.num_classes())));
    }
    let started = Instant::now();
    let root = RngStream::new(seed).fork_named("finetune");
    let mut metrics = RunMetrics::new(seed, fingerprint);
    let mut state = model.optimizer_state();
    let frozen = model.freeze_encoder;
    let cache = |idx: &[usize]| -> Result<Option<Tensor>> {
        if frozen && !idx.is_empty() { encode(&model, ds, idx).map(Some) } else { Ok(None) }
    };
    let train_cache = if pipeline.is_empty() { cache(&splits.train)? } else { None };
    let (val_cache, test_cache) = (cache(&splits.val)?, cache(&splits.test)?);
    let position: BTreeMap<usize, usize> = splits.train.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let budget = step_budget(&cfg.optimizer);
    let mut steps = 0usize;
    let eval = |model: &ModelAssembly, idx: &[usize], cached: &Option<Tensor>| -> Result<Evaluation> {
        let logits = match cached {
            Some(f) => model.infer_features(f)?,
            None => predict(model, ds, idx)?,
        };
        Ok(evaluate_logits(&logits, &labels_of(ds, idx), classes))
    };
    for epoch in 0..cfg.optimizer.epochs {
        let aug = root.fork_named("augment").fork(epoch as u64);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in shuffled(&splits.train, &root, epoch).chunks(cfg.batch_size) {
            if (!frozen && chunk.len() < 2) || steps >= budget {
                continue;
            }
            let labels = labels_of(ds, chunk);
            let mut step = || -> Result<f64> {
                let mut tape = Tape::new();
                let pass = if frozen {
                    let feats = match &train_cache {
                        Some(f) => gather_rows(f, &chunk.iter().map(|i| position[i]).collect::<Vec<_>>())?,
                        None => model.features(&image_batch(ds, chunk, Some((pipeline, &aug)))?)?,
                    };
                    model.forward_features(&mut tape, &feats)?
                } else {
                    model.forward(&mut tape, &image_batch(ds, chunk, Some((pipeline, &aug)))?, Mode::Train)?
                };
                let loss = cross_entropy(&mut tape, &pass.output, &labels)?;
                let grads = tape.backward(&loss)?;
                model.apply_step(&pass, &grads, &mut state, &cfg.optimizer)?;
                Ok(loss.item()? as f64)
            };
            total += step().map_err(|e| e.at_step("finetune", steps))?;
            count += 1;
            steps += 1;
        }
        if count > 0 {
            metrics.epoch(epoch, "train", "loss", total / count as f64);
        }
        if !splits.val.is_empty() {
            metrics.epoch(epoch, "val", "accuracy", eval(&model, &splits.val, &val_cache)?.accuracy);
        }
    }
    if !splits.val.is_empty() {
        metrics.final_value("val", "accuracy", eval(&model, &splits.val, &val_cache)?.accuracy);
    }
    if !splits.test.is_empty() {
        let e = eval(&model, &splits.test, &test_cache)?;
        metrics.final_value("test", "accuracy", e.accuracy);
        for (c, a) in e.per_class.iter().enumerate() {
            if let Some(a) = a {
                metrics.final_value("test", &format!("accuracy_class_{c}"), *a);
            }
        }
    }
    metrics.final_value("train", "steps", steps as f64);
    metrics.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(Outcome { model, metrics, steps: steps as u64 })
}

/// Fraction of rows where both argmaxes coincide.
pub fn agreement(a: &Tensor, b: &Tensor) -> f64 {
    let (pa, pb) = (argmax_rows(a), argmax_rows(b));
    if pa.is_empty() {
        return 0.0;
    }
    pa.iter().zip(&pb).filter(|(x, y)| x == y).count() as f64 / pa.len() as f64
}

/// Trains `student` to match `teacher`'s softened predictions on
/// `splits.train`, stopping once validation agreement has not improved for
/// `early_stop_patience` epochs. Returns the best-agreement student.
pub fn distill(
    teacher: &ModelAssembly,
    mut student: ModelAssembly,
    ds: &ImageDataset,
    splits: &DataSplits,
    pipeline: &AugmentPipeline,
    cfg: &DistillConfig,
    seed: u64,
    fingerprint: &str,
) -> Result<Outcome> {
    cfg.validate()?;
    let (tk, sk) = (teacher.classes(), student.classes());
    if tk.is_none() || tk != sk {
        return Err(Error::config(format!("teacher has {tk:?} classes, student {sk:?}")));
    }
    if splits.train.is_empty() || splits.val.is_empty() {
        return Err(Error::config("distillation needs non-empty train and validation splits"));
    }
    let started = Instant::now();
    let root = RngStream::new(seed).fork_named("distill");
    let mut metrics = RunMetrics::new(seed, fingerprint);
    let mut state = student.optimizer_state();
    let augment = cfg.augment && !pipeline.is_empty();
    let cache_feats = student.freeze_encoder && !augment;
    let teacher_train = if augment { None } else { Some(predict(teacher, ds, &splits.train)?) };
    let (teacher_val, teacher_test) = (predict(teacher, ds, &splits.val)?, predict(teacher, ds, &splits.test)?);
    let feats = |idx: &[usize]| -> Result<Option<Tensor>> {
        if cache_feats && !idx.is_empty() { encode(&student, ds, idx).map(Some) } else { Ok(None) }
    };
    let (train_f, val_f, test_f) = (feats(&splits.train)?, feats(&splits.val)?, feats(&splits.test)?);
    let student_logits = |m: &ModelAssembly, idx: &[usize], cached: &Option<Tensor>| -> Result<Tensor> {
        match cached {
            Some(f) => m.infer_features(f),
            None => predict(m, ds, idx),
        }
    };
    let position: BTreeMap<usize, usize> = splits.train.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let labels_needed = cfg.alpha > 0.0;
    let budget = step_budget(&cfg.optimizer);
    let mut best = (agreement(&student_logits(&student, &splits.val, &val_f)?, &teacher_val), 0usize, student.clone());
    metrics.final_value("val", "initial_agreement", best.0);
    let mut steps = 0usize;
    let mut best_steps = 0usize;
    for epoch in 0..cfg.optimizer.epochs {
        let aug = root.fork_named("augment").fork(epoch as u64);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in shuffled(&splits.train, &root, epoch).chunks(cfg.batch_size) {
            if (!student.freeze_encoder && chunk.len() < 2) || steps >= budget {
                continue;
            }
            let rows: Vec<usize> = chunk.iter().map(|i| position[i]).collect();
            let labels = labels_of(ds, chunk);
            let mut step = || -> Result<f64> {
                let mut tape = Tape::new();
                let (t_logits, pass) = if augment {
                    let x = image_batch(ds, chunk, Some((pipeline, &aug)))?;
                    (teacher.infer(&x)?, student.forward(&mut tape, &x, Mode::Train)?)
                } else {
                    let t = gather_rows(teacher_train.as_ref().expect("cached"), &rows)?;
                    let pass = match &train_f {
                        Some(f) => student.forward_features(&mut tape, &gather_rows(f, &rows)?)?,
                        None => student.forward(&mut tape, &image_batch(ds, chunk, None)?, Mode::Train)?,
                    };
                    (t, pass)
                };
                let loss = distillation_loss(
                    &mut tape,
                    &t_logits,
                    &pass.output,
                    cfg.temperature,
                    cfg.alpha,
                    labels_needed.then_some(labels.as_slice()),
                )?;
                let grads = tape.backward(&loss)?;
                student.apply_step(&pass, &grads, &mut state, &cfg.optimizer)?;
                Ok(loss.item()? as f64)
            };
            total += step().map_err(|e| e.at_step("distill", steps))?;
            count += 1;
            steps += 1;
        }
        if count > 0 {
            metrics.epoch(epoch, "train", "loss", total / count as f64);
        }
        let val = agreement(&student_logits(&student, &splits.val, &val_f)?, &teacher_val);
        metrics.epoch(epoch, "val", "agreement", val);
        if val > best.0 {
            best = (val, epoch + 1, student.clone());
            best_steps = steps;
        } else if epoch + 1 - best.1 >= cfg.early_stop_patience {
            break;
        }
    }
    let (best_val, best_epoch, model) = best;
    metrics.final_value("val", "agreement", best_val);
    metrics.final_value("train", "best_epoch", best_epoch as f64);
    if !splits.test.is_empty() {
        let s = student_logits(&model, &splits.test, &test_f)?;
        let labels = labels_of(ds, &splits.test);
        let k = tk.expect("checked");
        metrics.final_value("test", "agreement", agreement(&s, &teacher_test));
        metrics.final_value("test", "accuracy", evaluate_logits(&s, &labels, k).accuracy);
        metrics.final_value("test", "teacher_accuracy", evaluate_logits(&teacher_test, &labels, k).accuracy);
    }
    metrics.final_value("train", "steps", best_steps as f64);
    metrics.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(Outcome { model, metrics, steps: best_steps as u64 })
}

/// Mean test accuracy of one (dataset, batch size) grid point.
#[derive(Debug, Clone)]
pub struct TransferCell {
    pub dataset: String,
    pub classes: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub runs: Vec<RunMetrics>,
}

impl TransferCell {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct TransferTable {
    /// Sorted by class count, then dataset name, then batch size.
    pub cells: Vec<TransferCell>,
}

impl TransferTable {
    /// Class count → mean accuracy, one series per batch size.
    pub fn series(&self) -> BTreeMap<usize, Vec<(usize, f64)>> {
        let mut out: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for c in &self.cells {
            out.entry(c.batch_size).or_default().push((c.classes, c.mean()));
        }
        out
    }
}

/// Fine-tunes the encoder on a labeled fraction of each dataset, for every
/// batch size and seed, and reports test accuracy.
#[allow(clippy::too_many_arguments)]
pub fn transfer_run(
    encoder: &Checkpoint,
    datasets: &[ImageDataset],
    pipeline: &AugmentPipeline,
    cfg: &FinetuneConfig,
    label_fraction: f64,
    batch_sizes: &[usize],
    seeds: &[u64],
    fingerprint: &str,
) -> Result<TransferTable> {
    if datasets.is_empty() || batch_sizes.is_empty() || seeds.is_empty() {
        return Err(Error::config("transfer_run needs datasets, batch sizes and seeds"));
    }
    let mut cells = Vec::new();
    for ds in datasets {
        for &batch_size in batch_sizes {
            let run_cfg = FinetuneConfig { batch_size, ..*cfg };
            let mut cell = TransferCell {
                dataset: ds.name().to_string(),
                classes: ds.num_classes(),
                batch_size,
                seeds: seeds.to_vec(),
                accuracies: Vec::new(),
                runs: Vec::new(),
            };
            for &seed in seeds {
                let part = split_and_subsample(ds, &LabelBudget { fraction: label_fraction, seed, stratified: true })?;
                let out = finetune(encoder, ds, &DataSplits::from(&part), pipeline, &run_cfg, seed, fingerprint)?;
                cell.accuracies.push(out.metrics.get("test", "accuracy").unwrap_or(0.0));
                cell.runs.push(out.metrics);
            }
            cells.push(cell);
        }
    }
    cells.sort_by(|a, b| (a.classes, &a.dataset, a.batch_size).cmp(&(b.classes, &b.dataset, b.batch_size)));
    Ok(TransferTable { cells })
}
