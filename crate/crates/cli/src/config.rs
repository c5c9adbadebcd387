//! Experiment configuration files (TOML).
//!
//! Every key has a default; only `kind` is required. Unknown keys anywhere
//! are rejected. See `configs/README.md` for the full grammar.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use simcl_core::augment::Preset;
use simcl_core::dataio::SyntheticShapesSpec;
use simcl_core::learn::{ClassifierHead, ContrastConfig, DistillConfig, FinetuneConfig, FinetuneMode};
use simcl_core::nets::{parse_descriptor, Descriptor, HeadKind};
use simcl_core::tensor::SgdHyper;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Pretrain,
    Finetune,
    Distill,
    Transfer,
    ExpAugment,
    ExpDistill,
    ExpTransfer,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Pretrain => "pretrain",
            ExperimentKind::Finetune => "finetune",
            ExperimentKind::Distill => "distill",
            ExperimentKind::Transfer => "transfer",
            ExperimentKind::ExpAugment => "exp-augment",
            ExperimentKind::ExpDistill => "exp-distill",
            ExperimentKind::ExpTransfer => "exp-transfer",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Shapes,
    Cifar10,
    Cifar100,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub source: DataSource,
    /// Directory holding the CIFAR binary batches.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Validation share carved from CIFAR train data. Shapes datasets use
    /// `shapes.val_fraction` instead.
    pub val_fraction: f64,
    pub shapes: SyntheticShapesSpec,
    /// Share of train labels visible to supervised stages.
    pub label_fraction: f64,
    pub stratified: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: DataSource::Shapes,
            path: None,
            val_fraction: 0.1,
            shapes: SyntheticShapesSpec::default(),
            label_fraction: 1.0,
            stratified: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderSource {
    /// Contrastive pretraining with the `[pretrain]` section.
    #[default]
    Pretrain,
    Random,
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub arch: String,
    pub source: EncoderSource,
    /// Used when `source = "checkpoint"`. `{seed}` expands to the run seed
    /// and `{out}` to the output root.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self { arch: "mini_res/w16/d3".into(), source: EncoderSource::Pretrain, checkpoint: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub preset: String,
    pub temperature: f64,
    pub batch_size: usize,
    pub optimizer: SgdHyper,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let c = ContrastConfig::default();
        Self { preset: "all".into(), temperature: c.temperature, batch_size: c.batch_size, optimizer: c.optimizer }
    }
}

impl PretrainSection {
    pub fn contrast(&self) -> ContrastConfig {
        ContrastConfig { temperature: self.temperature, batch_size: self.batch_size, optimizer: self.optimizer }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub mode: FinetuneMode,
    pub head: ClassifierHead,
    pub preset: String,
    pub batch_size: usize,
    pub optimizer: SgdHyper,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let c = FinetuneConfig::default();
        Self { mode: c.mode, head: c.head, preset: "none".into(), batch_size: c.batch_size, optimizer: c.optimizer }
    }
}

impl FinetuneSection {
    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig { mode: self.mode, head: self.head, batch_size: self.batch_size, optimizer: self.optimizer }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub arch: String,
    /// A trained classifier; when absent the teacher is trained from
    /// scratch with full supervised fine-tuning and a dense head.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    pub preset: String,
    pub batch_size: usize,
    pub optimizer: SgdHyper,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            arch: "mini_res/w32/d3".into(),
            checkpoint: None,
            preset: "none".into(),
            batch_size: 64,
            optimizer: SgdHyper { epochs: 10, learning_rate: 0.05, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StudentBase {
    /// Short contrastive pretrain with the `[pretrain]` section.
    #[default]
    Pretrain,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub teacher: TeacherSection,
    /// Student descriptors. A classifier head may be given; otherwise a
    /// dense head sized to the dataset is attached.
    pub students: Vec<String>,
    pub student_base: StudentBase,
    pub freeze_base: bool,
    pub temperature: f64,
    pub alpha: f64,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub augment: bool,
    pub preset: String,
    pub optimizer: SgdHyper,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self {
            teacher: TeacherSection::default(),
            students: vec!["mini_res/w16/d3".into()],
            student_base: StudentBase::Pretrain,
            freeze_base: true,
            temperature: d.temperature,
            alpha: d.alpha,
            early_stop_patience: d.early_stop_patience,
            batch_size: d.batch_size,
            augment: d.augment,
            preset: "none".into(),
            optimizer: d.optimizer,
        }
    }
}

impl DistillSection {
    pub fn distill(&self) -> DistillConfig {
        DistillConfig {
            temperature: self.temperature,
            alpha: self.alpha,
            early_stop_patience: self.early_stop_patience,
            batch_size: self.batch_size,
            augment: self.augment,
            optimizer: self.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    /// Class counts swept by `exp-transfer`.
    pub classes: Vec<usize>,
    /// Images per generated dataset, split evenly over its classes.
    pub total_images: usize,
    pub batch_sizes: Vec<usize>,
}

impl Default for TransferSection {
    fn default() -> Self {
        Self { classes: vec![2, 5, 10, 20], total_images: 600, batch_sizes: vec![64] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    /// Presets compared by `exp-augment`.
    pub presets: Vec<String>,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self { presets: Preset::ALL.iter().map(|p| p.name().to_string()).collect() }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Output subdirectory; defaults to `<kind>-<fingerprint>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Output root; falls back to `$SIMCL_OUT`, then `simcl-out`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub transfer: TransferSection,
    #[serde(default)]
    pub augment: AugmentSection,
}

/// A parse or validation failure, located where possible.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, &self.key) {
            (Some(l), Some(k)) => write!(f, "line {l}, key `{k}`: {}", self.message),
            (None, Some(k)) => write!(f, "key `{k}`: {}", self.message),
            (Some(l), None) => write!(f, "line {l}: {}", self.message),
            (None, None) => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line defining the dotted `key`, following `[table]` headers.
fn locate(text: &str, key: &str) -> Option<usize> {
    let mut table = String::new();
    let mut fallback = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(h) = line.strip_prefix('[') {
            table = h.trim_start_matches('[').trim_end_matches(']').trim().to_string();
            if table == key {
                return Some(n + 1);
            }
            if fallback.is_none() && table.starts_with(&format!("{key}.")) {
                fallback = Some(n + 1);
            }
            continue;
        }
        let Some((k, _)) = line.split_once('=') else { continue };
        let k = k.trim().trim_matches('"');
        let full = if table.is_empty() { k.to_string() } else { format!("{table}.{k}") };
        if full == key {
            return Some(n + 1);
        }
        if fallback.is_none() && key.starts_with(&format!("{full}.")) {
            fallback = Some(n + 1);
        }
    }
    fallback
}

fn unknown_key(message: &str) -> Option<String> {
    let rest = message.split("unknown field `").nth(1)?;
    Some(rest.split('`').next()?.to_string())
}

struct Invalid(&'static str, String);

fn check(ok: bool, key: &'static str, msg: impl FnOnce() -> String) -> Result<(), Invalid> {
    if ok {
        Ok(())
    } else {
        Err(Invalid(key, msg()))
    }
}

fn core(key: &'static str, r: simcl_core::Result<()>) -> Result<(), Invalid> {
    r.map_err(|e| Invalid(key, e.to_string()))
}

fn canonical_preset(name: &str, key: &'static str) -> Result<String, Invalid> {
    name.trim()
        .parse::<Preset>()
        .map(|p| p.name().to_string())
        .map_err(|e| Invalid(key, e.to_string()))
}

fn canonical_descriptor(text: &str, key: &'static str) -> Result<(String, Descriptor), Invalid> {
    let d = parse_descriptor(text.trim()).map_err(|e| Invalid(key, e.to_string()))?;
    core(key, d.encoder.validate())?;
    let mut s = d.encoder.descriptor();
    if let Some(h) = d.head {
        s = format!("{s}+{}", h.descriptor());
    }
    Ok((s, d))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of(text, s.start));
            ConfigError { line, key: unknown_key(e.message()), message: e.message().trim().to_string() }
        })?;
        raw.normalized().map_err(|Invalid(key, message)| ConfigError { line: locate(text, key), key: Some(key.into()), message })
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            line: None,
            key: None,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    /// Validates every section and rewrites names into canonical form.
    fn normalized(mut self) -> Result<Self, Invalid> {
        check(!self.seeds.is_empty(), "seeds", || "at least one seed is required".into())?;
        if let Some(n) = &self.name {
            check(!n.is_empty() && !n.contains(['/', '\\']) && n != "." && n != "..", "name", || {
                format!("`{n}` is not a valid directory name")
            })?;
        }
        let d = &self.dataset;
        check(d.label_fraction > 0.0 && d.label_fraction <= 1.0, "dataset.label_fraction", || {
            format!("must lie in (0, 1], got {}", d.label_fraction)
        })?;
        check((0.0..1.0).contains(&d.val_fraction), "dataset.val_fraction", || format!("must lie in [0, 1), got {}", d.val_fraction))?;
        let s = &d.shapes;
        check(s.num_classes >= 2, "dataset.shapes.num_classes", || "need at least two classes".into())?;
        check(s.per_class >= 1, "dataset.shapes.per_class", || "must be positive".into())?;
        check(s.noise_std >= 0.0 && s.noise_std.is_finite(), "dataset.shapes.noise_std", || "must be non-negative".into())?;
        check((0.0..1.0).contains(&s.test_fraction), "dataset.shapes.test_fraction", || "must lie in [0, 1)".into())?;
        check((0.0..1.0).contains(&s.val_fraction), "dataset.shapes.val_fraction", || "must lie in [0, 1)".into())?;
        if d.source != DataSource::Shapes {
            check(d.path.is_some(), "dataset.path", || "CIFAR sources need a directory".into())?;
        }

        let (arch, desc) = canonical_descriptor(&self.encoder.arch, "encoder.arch")?;
        check(desc.head.is_none(), "encoder.arch", || "give the encoder only, without a head".into())?;
        self.encoder.arch = arch;
        if self.encoder.source == EncoderSource::Checkpoint {
            check(self.encoder.checkpoint.is_some(), "encoder.checkpoint", || "required when source = \"checkpoint\"".into())?;
        }

        self.pretrain.preset = canonical_preset(&self.pretrain.preset, "pretrain.preset")?;
        core("pretrain.optimizer", self.pretrain.optimizer.validate())?;
        core("pretrain", self.pretrain.contrast().validate())?;
        self.finetune.preset = canonical_preset(&self.finetune.preset, "finetune.preset")?;
        core("finetune.optimizer", self.finetune.optimizer.validate())?;
        core("finetune", self.finetune.finetune().validate())?;

        let dist = &mut self.distill;
        let (t, td) = canonical_descriptor(&dist.teacher.arch, "distill.teacher.arch")?;
        if let Some(h) = td.head {
            check(h.classes().is_some(), "distill.teacher.arch", || "teacher head must be a classifier".into())?;
        }
        dist.teacher.arch = t;
        dist.teacher.preset = canonical_preset(&dist.teacher.preset, "distill.teacher.preset")?;
        check(dist.teacher.batch_size > 0, "distill.teacher.batch_size", || "must be positive".into())?;
        core("distill.teacher.optimizer", dist.teacher.optimizer.validate())?;
        check(!dist.students.is_empty(), "distill.students", || "at least one student is required".into())?;
        for st in dist.students.iter_mut() {
            let (s, sd) = canonical_descriptor(st, "distill.students")?;
            if let Some(h) = sd.head {
                check(!matches!(h, HeadKind::Projection { .. }), "distill.students", || {
                    format!("student `{s}` needs a classifier head")
                })?;
            }
            *st = s;
        }
        dist.preset = canonical_preset(&dist.preset, "distill.preset")?;
        core("distill.optimizer", dist.optimizer.validate())?;
        core("distill", dist.distill().validate())?;

        let tr = &self.transfer;
        check(!tr.classes.is_empty() && tr.classes.iter().all(|&k| k >= 2), "transfer.classes", || {
            "need one or more class counts, each at least 2".into()
        })?;
        check(!tr.batch_sizes.is_empty() && tr.batch_sizes.iter().all(|&b| b > 0), "transfer.batch_sizes", || {
            "need one or more positive batch sizes".into()
        })?;
        let most = tr.classes.iter().copied().max().unwrap_or(2);
        check(tr.total_images >= most, "transfer.total_images", || format!("must give every class an image ({most} classes)"))?;
        check(!self.augment.presets.is_empty(), "augment.presets", || "at least one preset is required".into())?;
        for p in self.augment.presets.iter_mut() {
            *p = canonical_preset(p, "augment.presets")?;
        }
        match self.kind {
            ExperimentKind::Distill => check(self.distill.students.len() == 1, "distill.students", || {
                "`distill` trains one student; use `exp-distill` to compare several".into()
            })?,
            ExperimentKind::ExpDistill => check(self.distill.students.len() >= 2, "distill.students", || {
                "`exp-distill` compares two or more students".into()
            })?,
            _ => {}
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs always serialize")
    }

    /// First 16 hex digits of SHA-256 over the canonical form, ignoring the
    /// seed list and output root so seeds run separately still aggregate.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        c.out = None;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Directory name of this experiment under the output root.
    pub fn run_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| format!("{}-{}", self.kind, self.fingerprint()))
    }

    /// `--out`, then the config's `out`, then `$SIMCL_OUT`, then `simcl-out`.
    pub fn output_root(&self, cli: Option<PathBuf>) -> PathBuf {
        cli.or_else(|| self.out.clone())
            .or_else(|| std::env::var_os("SIMCL_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("simcl-out"))
    }
}
