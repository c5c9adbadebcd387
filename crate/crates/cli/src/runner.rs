//! Executes an experiment config and writes its run directories.
//!
//! Layout under `<root>/<run name>/`:
//!
//! ```text
//! config.toml                  normalized config
//! experiment.json              kind, fingerprint, unit labels
//! encoders/seed-<s>/model.ckpt pretrained encoders built inline
//! <label>/seed-<s>/metrics.csv
//! <label>/seed-<s>/summary.json
//! <label>/seed-<s>/model.ckpt
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use simcl_core::augment::{AugmentPipeline, Preset};
use simcl_core::dataio::{
    generate_shapes, load_checkpoint, load_cifar, split_and_subsample, Checkpoint, CifarVariant, ImageDataset, LabelBudget, Split,
};
use simcl_core::learn::{distill, finetune, pretrain, train_classifier, transfer_run, DataSplits, FinetuneConfig, FinetuneMode, Outcome, RunMetrics};
use simcl_core::nets::{parse_descriptor, HeadKind, ModelAssembly};

use crate::config::{DataSource, EncoderSource, ExperimentConfig, ExperimentKind, StudentBase};
use crate::CliError;

/// Dataset seeds for `exp-transfer` targets sit this far from the run seed.
pub const TRANSFER_SEED_OFFSET: u64 = 7;
/// Students are initialised from this offset of the run seed.
pub const STUDENT_SEED_OFFSET: u64 = 100;

/// Per-unit record written next to `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub kind: ExperimentKind,
    pub label: String,
    pub seed: u64,
    pub fingerprint: String,
    pub wall_clock_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// `split/metric` → run-level value.
    pub finals: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub kind: ExperimentKind,
    pub name: String,
    pub fingerprint: String,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub quiet: bool,
}

/// Directory-safe form of a unit label.
pub fn slug(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.') { c } else { '_' })
        .collect();
    s.trim_end_matches('_').to_string()
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Fills `{seed}` and `{out}` (the output root) in a checkpoint path.
fn expand(template: &str, seed: u64, root: &Path) -> PathBuf {
    PathBuf::from(template.replace("{seed}", &seed.to_string()).replace("{out}", &root.to_string_lossy()))
}

fn pipeline(name: &str) -> AugmentPipeline {
    name.parse::<Preset>().expect("presets are validated on load").into()
}

struct Job<'a> {
    cfg: &'a ExperimentConfig,
    dir: &'a Path,
    root: &'a Path,
    seed: u64,
    fp: String,
    quiet: bool,
}

impl Job<'_> {
    fn log(&self, msg: &str) {
        if !self.quiet {
            eprintln!("[{} seed {}] {msg}", self.cfg.kind, self.seed);
        }
    }

    fn dataset(&self) -> Result<ImageDataset, CliError> {
        let d = &self.cfg.dataset;
        let ds = match d.source {
            DataSource::Shapes => generate_shapes(&simcl_core::dataio::SyntheticShapesSpec {
                seed: d.shapes.seed.wrapping_add(self.seed),
                ..d.shapes
            })?,
            DataSource::Cifar10 | DataSource::Cifar100 => {
                let variant = if d.source == DataSource::Cifar10 { CifarVariant::Cifar10 } else { CifarVariant::Cifar100 };
                let mut ds = load_cifar(d.path.as_ref().expect("validated"), variant)?;
                ds.carve_validation(d.val_fraction, self.seed)?;
                ds
            }
        };
        Ok(ds)
    }

    fn splits(&self, ds: &ImageDataset) -> Result<DataSplits, CliError> {
        let d = &self.cfg.dataset;
        let part = split_and_subsample(ds, &LabelBudget { fraction: d.label_fraction, seed: self.seed, stratified: d.stratified })?;
        Ok(DataSplits::from(&part))
    }

    fn unit(&self, label: &str, metrics: &RunMetrics, model: Option<&Checkpoint>, extra: (Option<usize>, Option<usize>)) -> Result<(), CliError> {
        let dir = self.dir.join(slug(label)).join(format!("seed-{}", self.seed));
        write_atomic(&dir.join("metrics.csv"), metrics.to_csv().as_bytes())?;
        let finals = metrics
            .records
            .iter()
            .filter(|r| r.epoch.is_none())
            .map(|r| (format!("{}/{}", r.split, r.metric), r.value))
            .collect();
        let summary = Summary {
            kind: self.cfg.kind,
            label: label.to_string(),
            seed: self.seed,
            fingerprint: self.fp.clone(),
            wall_clock_secs: metrics.wall_clock_secs,
            classes: extra.0,
            batch_size: extra.1,
            finals,
        };
        write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(&summary).unwrap().as_bytes())?;
        if let Some(ck) = model {
            write_atomic(&dir.join("model.ckpt"), &ck.to_bytes())?;
        }
        Ok(())
    }

    fn pretrain_on(&self, arch: &str, ds: &ImageDataset, seed: u64) -> Result<Outcome, CliError> {
        let arch = parse_descriptor(arch)?.encoder;
        let p = &self.cfg.pretrain;
        let model = ModelAssembly::build(arch, Some(HeadKind::projection()), false, seed)?;
        let out = pretrain(model, ds, &ds.indices(Split::Train), &pipeline(&p.preset), &p.contrast(), self.seed, &self.fp)?;
        Ok(out)
    }

    /// The encoder later stages start from.
    fn encoder(&self, ds: &ImageDataset) -> Result<Checkpoint, CliError> {
        let e = &self.cfg.encoder;
        match e.source {
            EncoderSource::Checkpoint => Ok(load_checkpoint(expand(e.checkpoint.as_ref().expect("validated"), self.seed, self.root))?),
            EncoderSource::Random => {
                let arch = parse_descriptor(&e.arch)?.encoder;
                Ok(ModelAssembly::build(arch, None, false, self.seed)?.to_checkpoint(0, &self.fp))
            }
            EncoderSource::Pretrain => {
                self.log("pretraining encoder");
                let ck = self.pretrain_on(&e.arch, ds, self.seed)?.checkpoint();
                let path = self.dir.join("encoders").join(format!("seed-{}", self.seed)).join("model.ckpt");
                write_atomic(&path, &ck.to_bytes())?;
                Ok(ck)
            }
        }
    }

    fn finetune_unit(&self, label: &str, enc: &Checkpoint, ds: &ImageDataset, preset: &str) -> Result<(), CliError> {
        let f = &self.cfg.finetune;
        let out = finetune(enc, ds, &self.splits(ds)?, &pipeline(preset), &f.finetune(), self.seed, &self.fp)?;
        self.log(&format!("{label}: test accuracy {:.4}", out.metrics.get("test", "accuracy").unwrap_or(f64::NAN)));
        self.unit(label, &out.metrics, Some(&out.checkpoint()), (Some(ds.num_classes()), Some(f.batch_size)))
    }

    fn transfer(&self, enc: &Checkpoint, datasets: &[ImageDataset]) -> Result<(), CliError> {
        let (f, tr) = (&self.cfg.finetune, &self.cfg.transfer);
        let table = transfer_run(
            enc,
            datasets,
            &pipeline(&f.preset),
            &f.finetune(),
            self.cfg.dataset.label_fraction,
            &tr.batch_sizes,
            &[self.seed],
            &self.fp,
        )?;
        for cell in &table.cells {
            let label = format!("{}_bs{}", cell.dataset, cell.batch_size);
            self.log(&format!("{label}: test accuracy {:.4}", cell.mean()));
            self.unit(&label, &cell.runs[0], None, (Some(cell.classes), Some(cell.batch_size)))?;
        }
        Ok(())
    }

    fn teacher(&self, ds: &ImageDataset) -> Result<ModelAssembly, CliError> {
        let t = &self.cfg.distill.teacher;
        let k = ds.num_classes();
        if let Some(path) = &t.checkpoint {
            let m = ModelAssembly::from_checkpoint(&load_checkpoint(expand(path, self.seed, self.root))?, true)?;
            if m.classes() != Some(k) {
                return Err(CliError::Usage(format!("teacher checkpoint has {:?} classes, dataset has {k}", m.classes())));
            }
            return Ok(m);
        }
        let d = parse_descriptor(&t.arch)?;
        let model = ModelAssembly::build(d.encoder, Some(d.head.unwrap_or(HeadKind::dense(k))), false, self.seed)?;
        let cfg = FinetuneConfig { mode: FinetuneMode::Full, batch_size: t.batch_size, optimizer: t.optimizer, ..Default::default() };
        self.log("training teacher");
        let out = train_classifier(model, ds, &self.splits(ds)?, &pipeline(&t.preset), &cfg, self.seed, &self.fp)?;
        self.log(&format!("teacher: test accuracy {:.4}", out.metrics.get("test", "accuracy").unwrap_or(f64::NAN)));
        self.unit("teacher", &out.metrics, Some(&out.checkpoint()), (Some(k), Some(t.batch_size)))?;
        Ok(out.model)
    }

    fn distill_all(&self, ds: &ImageDataset) -> Result<(), CliError> {
        let dist = &self.cfg.distill;
        let teacher = self.teacher(ds)?;
        let mut splits = self.splits(ds)?;
        if dist.alpha == 0.0 {
            splits.train = ds.indices(Split::Train);
        }
        for st in &dist.students {
            let d = parse_descriptor(st)?;
            let head = d.head.unwrap_or(HeadKind::dense(ds.num_classes()));
            let mut student = ModelAssembly::build(d.encoder, Some(head), dist.freeze_base, self.seed + STUDENT_SEED_OFFSET)?;
            if dist.student_base == StudentBase::Pretrain {
                self.log(&format!("pretraining base of {st}"));
                let base = self.pretrain_on(&d.encoder.descriptor(), ds, self.seed + STUDENT_SEED_OFFSET)?;
                student.load_encoder(&base.checkpoint())?;
            }
            let out = distill(&teacher, student, ds, &splits, &pipeline(&dist.preset), &dist.distill(), self.seed, &self.fp)?;
            self.log(&format!("{st}: test agreement {:.4}", out.metrics.get("test", "agreement").unwrap_or(f64::NAN)));
            self.unit(st, &out.metrics, Some(&out.checkpoint()), (Some(ds.num_classes()), Some(dist.batch_size)))?;
        }
        Ok(())
    }

    fn run(&self) -> Result<(), CliError> {
        let ds = self.dataset()?;
        let cfg = self.cfg;
        match cfg.kind {
            ExperimentKind::Pretrain => {
                self.log("pretraining");
                let out = self.pretrain_on(&cfg.encoder.arch, &ds, self.seed)?;
                self.unit("pretrain", &out.metrics, Some(&out.checkpoint()), (None, Some(cfg.pretrain.batch_size)))
            }
            ExperimentKind::Finetune => {
                let enc = self.encoder(&ds)?;
                self.finetune_unit(&cfg.finetune.preset, &enc, &ds, &cfg.finetune.preset)
            }
            ExperimentKind::ExpAugment => {
                let enc = self.encoder(&ds)?;
                for p in &cfg.augment.presets {
                    self.finetune_unit(p, &enc, &ds, p)?;
                }
                Ok(())
            }
            ExperimentKind::Distill | ExperimentKind::ExpDistill => self.distill_all(&ds),
            ExperimentKind::Transfer => {
                let enc = self.encoder(&ds)?;
                self.transfer(&enc, std::slice::from_ref(&ds))
            }
            ExperimentKind::ExpTransfer => {
                let enc = self.encoder(&ds)?;
                let base = cfg.dataset.shapes;
                let targets = cfg
                    .transfer
                    .classes
                    .iter()
                    .map(|&k| {
                        generate_shapes(&simcl_core::dataio::SyntheticShapesSpec {
                            num_classes: k,
                            per_class: cfg.transfer.total_images / k,
                            seed: base.seed.wrapping_add(self.seed).wrapping_add(TRANSFER_SEED_OFFSET),
                            ..base
                        })
                    })
                    .collect::<simcl_core::Result<Vec<_>>>()?;
                self.transfer(&enc, &targets)
            }
        }
    }
}

fn collect_labels(dir: &Path) -> Vec<String> {
    let mut labels = Vec::new();
    let Ok(entries) = fs::read_dir(dir) else { return labels };
    for e in entries.flatten() {
        let Ok(seeds) = fs::read_dir(e.path()) else { continue };
        for s in seeds.flatten() {
            if let Ok(text) = fs::read_to_string(s.path().join("summary.json")) {
                if let Ok(sum) = serde_json::from_str::<Summary>(&text) {
                    labels.push(sum.label);
                    break;
                }
            }
        }
    }
    labels.sort();
    labels.dedup();
    labels
}

/// Runs every seed of `cfg` and returns the experiment directory.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<PathBuf, CliError> {
    let mut cfg = cfg.clone();
    if let Some(s) = opts.seed {
        cfg.seeds = vec![s];
    }
    let fp = cfg.fingerprint();
    let root = cfg.output_root(opts.out.clone());
    let dir = root.join(cfg.run_name());
    let record_path = dir.join("experiment.json");
    if let Ok(text) = fs::read_to_string(&record_path) {
        let old: ExperimentRecord = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{} is not an experiment record: {e}", record_path.display())))?;
        if old.fingerprint != fp {
            return Err(CliError::Usage(format!(
                "{} holds experiment {} but this config is {fp}; choose another name or output root",
                dir.display(),
                old.fingerprint
            )));
        }
    }
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;

    let started = Instant::now();
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<CliError>> = Mutex::new(None);
    let workers = opts.threads.max(1).min(cfg.seeds.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cfg.seeds.len() || failure.lock().unwrap().is_some() {
                    break;
                }
                let job = Job { cfg: &cfg, dir: &dir, root: &root, seed: cfg.seeds[i], fp: fp.clone(), quiet: opts.quiet };
                if let Err(e) = job.run() {
                    failure.lock().unwrap().get_or_insert(e.with_seed(job.seed));
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let record = ExperimentRecord { kind: cfg.kind, name: cfg.run_name(), fingerprint: fp, labels: collect_labels(&dir) };
    write_atomic(&record_path, serde_json::to_string_pretty(&record).unwrap().as_bytes())?;
    if !opts.quiet {
        eprintln!("{}: {} seed(s) in {:.1}s -> {}", cfg.kind, cfg.seeds.len(), started.elapsed().as_secs_f64(), dir.display());
    }
    Ok(dir)
}
