//! Small convolutional encoders, heads and their assembly.
//!
//! Both encoder families share one stage layout. With width `w` and depth
//! `D`, stage `s` has `w·2^s` channels:
//!
//! ```text
//! stem     conv3×3(3→w) BN ReLU, max-pool 2
//! stage s  [s > 0: conv3×3(c_{s-1}→c_s) BN ReLU]
//!          conv3×3 BN ReLU, conv3×3 BN, (+ skip for mini_res), ReLU
//!          max-pool 2 between stages
//! output   global average pool → w·2^(D-1) features
//! ```
//!
//! Convolutions carry no bias; batch norm supplies the shift.
//!
//! Architecture descriptors follow
//! `<family>/w<width>/d<depth>[+proj(<hidden>,<out>)|+linear(<k>)|+dense(<hidden>,<k>)]`,
//! for example `mini_res/w16/d3+linear(5)`.

mod descriptor;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Checkpoint, NamedTensor};
use crate::tensor::{sgd_step, BnMode, BnStats, Conv2dAttrs, Gradients, SgdHyper, SgdState, Tape, Tensor};
use crate::{Error, Result, RngStream};

pub use descriptor::{parse_descriptor, Descriptor};

pub const RUNNING_DECAY: f32 = 0.9;
pub const DEFAULT_DENSE_HIDDEN: usize = 64;
pub const DEFAULT_PROJECTION: (usize, usize) = (64, 32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    MiniRes,
    MiniPlain,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::MiniRes => "mini_res",
            Family::MiniPlain => "mini_plain",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderArch {
    pub family: Family,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
}

fn default_width() -> usize {
    16
}

fn default_depth() -> usize {
    3
}

impl EncoderArch {
    pub fn new(family: Family, width: usize, depth: usize) -> Self {
        Self { family, width, depth }
    }

    pub fn feature_dim(&self) -> usize {
        self.width << (self.depth - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 4 {
            return Err(Error::config(format!("encoder width must be at least 4, got {}", self.width)));
        }
        if !(1..=5).contains(&self.depth) {
            return Err(Error::config(format!("encoder depth must lie in 1..=5, got {}", self.depth)));
        }
        Ok(())
    }

    pub fn descriptor(&self) -> String {
        format!("{}/w{}/d{}", self.family, self.width, self.depth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadKind {
    Projection { hidden: usize, output: usize },
    Linear { classes: usize },
    Dense { hidden: usize, classes: usize },
}

impl HeadKind {
    pub fn projection() -> Self {
        HeadKind::Projection { hidden: DEFAULT_PROJECTION.0, output: DEFAULT_PROJECTION.1 }
    }

    pub fn dense(classes: usize) -> Self {
        HeadKind::Dense { hidden: DEFAULT_DENSE_HIDDEN, classes }
    }

    /// Number of classes for classifier heads.
    pub fn classes(&self) -> Option<usize> {
        match *self {
            HeadKind::Projection { .. } => None,
            HeadKind::Linear { classes } | HeadKind::Dense { classes, .. } => Some(classes),
        }
    }

    pub fn descriptor(&self) -> String {
        match *self {
            HeadKind::Projection { hidden, output } => format!("proj({hidden},{output})"),
            HeadKind::Linear { classes } => format!("linear({classes})"),
            HeadKind::Dense { hidden, classes } => format!("dense({hidden},{classes})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Layer {
    Conv { w: usize },
    Bn { gamma: usize, beta: usize, slot: usize },
    Relu,
    Pool,
    Mark,
    Skip,
    GlobalPool,
    Affine { w: usize, b: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct Param {
    name: String,
    value: Tensor,
}

/// Running batch-norm estimates for one normalisation layer.
#[derive(Debug, Clone, PartialEq)]
struct Running {
    name: String,
    mean: Vec<f32>,
    var: Vec<f32>,
}

fn he_uniform(name: &str, shape: &[usize], fan_in: usize, seed: u64) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let mut rng = RngStream::new(seed).fork_named(name);
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(shape, values).expect("shape and count agree")
}

#[derive(Default)]
struct Builder {
    params: Vec<Param>,
    running: Vec<Running>,
    layers: Vec<Layer>,
}

impl Builder {
    fn push(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, seed: u64) {
        let name = format!("{name}.w");
        let w = he_uniform(&name, &[cout, cin, 3, 3], cin * 9, seed);
        let w = self.push(name, w);
        self.layers.push(Layer::Conv { w });
    }

    fn bn(&mut self, name: &str, channels: usize) {
        let gamma = self.push(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(&[channels]));
        self.running.push(Running { name: name.to_string(), mean: vec![0.0; channels], var: vec![1.0; channels] });
        self.layers.push(Layer::Bn { gamma, beta, slot: self.running.len() - 1 });
    }

    fn affine(&mut self, name: &str, din: usize, dout: usize, seed: u64) {
        let wname = format!("{name}.w");
        let w = he_uniform(&wname, &[dout, din], din, seed);
        let w = self.push(wname, w);
        let b = self.push(format!("{name}.b"), Tensor::zeros(&[dout]));
        self.layers.push(Layer::Affine { w, b });
    }
}

/// A parameterised encoder with its running normalisation statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    arch: EncoderArch,
    params: Vec<Param>,
    running: Vec<Running>,
    layers: Vec<Layer>,
}

pub fn build_encoder(arch: EncoderArch, seed: u64) -> Result<Encoder> {
    arch.validate()?;
    let mut b = Builder::default();
    let w = arch.width;
    b.conv("enc.stem.conv", 3, w, seed);
    b.bn("enc.stem.bn", w);
    b.layers.push(Layer::Relu);
    b.layers.push(Layer::Pool);
    for s in 0..arch.depth {
        let c = w << s;
        if s > 0 {
            b.layers.push(Layer::Pool);
            let p = format!("enc.s{s}.down");
            b.conv(&format!("{p}.conv"), c / 2, c, seed);
            b.bn(&format!("{p}.bn"), c);
            b.layers.push(Layer::Relu);
        }
        let p = format!("enc.s{s}.block");
        b.layers.push(Layer::Mark);
        b.conv(&format!("{p}.conv1"), c, c, seed);
        b.bn(&format!("{p}.bn1"), c);
        b.layers.push(Layer::Relu);
        b.conv(&format!("{p}.conv2"), c, c, seed);
        b.bn(&format!("{p}.bn2"), c);
        if arch.family == Family::MiniRes {
            b.layers.push(Layer::Skip);
        }
        b.layers.push(Layer::Relu);
    }
    b.layers.push(Layer::GlobalPool);
    Ok(Encoder { arch, params: b.params, running: b.running, layers: b.layers })
}

impl Encoder {
    pub fn arch(&self) -> EncoderArch {
        self.arch
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    kind: HeadKind,
    input_dim: usize,
    params: Vec<Param>,
    layers: Vec<Layer>,
}

pub fn build_head(kind: HeadKind, input_dim: usize, seed: u64) -> Result<Head> {
    let dims_ok = match kind {
        HeadKind::Projection { hidden, output } => hidden > 0 && output > 0,
        HeadKind::Linear { classes } => classes >= 2,
        HeadKind::Dense { hidden, classes } => hidden > 0 && classes >= 2,
    };
    if !dims_ok || input_dim == 0 {
        return Err(Error::config(format!("invalid head dimensions {}", kind.descriptor())));
    }
    let mut b = Builder::default();
    match kind {
        HeadKind::Projection { hidden, output } => {
            b.affine("head.fc1", input_dim, hidden, seed);
            b.layers.push(Layer::Relu);
            b.affine("head.fc2", hidden, output, seed);
        }
        HeadKind::Linear { classes } => b.affine("head.fc", input_dim, classes, seed),
        HeadKind::Dense { hidden, classes } => {
            b.affine("head.fc1", input_dim, hidden, seed);
            b.layers.push(Layer::Relu);
            b.affine("head.fc2", hidden, classes, seed);
        }
    }
    Ok(Head { kind, input_dim, params: b.params, layers: b.layers })
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Output of one forward pass. `handles` are the tensors that stood in for
/// each trainable parameter, in trainable order, so gradients can be looked
/// up after `backward`.
pub struct Pass {
    pub output: Tensor,
    handles: Vec<Tensor>,
    stats: Vec<(usize, BnStats)>,
}

fn run_layers(
    tape: &mut Tape,
    layers: &[Layer],
    params: &[Tensor],
    running: &[Running],
    train: bool,
    x: &Tensor,
    stats: &mut Vec<(usize, BnStats)>,
) -> Result<Tensor> {
    let mut x = x.clone();
    let mut mark = None;
    for layer in layers {
        x = match *layer {
            Layer::Conv { w } => tape.conv2d(&x, &params[w], Conv2dAttrs { stride: 1, pad: 1 })?,
            Layer::Bn { gamma, beta, slot } => {
                let mode = if train {
                    BnMode::Train
                } else {
                    BnMode::Eval { mean: &running[slot].mean, var: &running[slot].var }
                };
                let (y, s) = tape.batch_norm(&x, &params[gamma], &params[beta], mode)?;
                if let Some(s) = s {
                    stats.push((slot, s));
                }
                y
            }
            Layer::Relu => tape.relu(&x)?,
            Layer::Pool => tape.max_pool2(&x)?,
            Layer::Mark => {
                mark = Some(x.clone());
                x
            }
            Layer::Skip => {
                let skip = mark.take().ok_or_else(|| Error::State("skip without a marked input".into()))?;
                tape.add(&x, &skip)?
            }
            Layer::GlobalPool => tape.avg_pool_global(&x)?,
            Layer::Affine { w, b } => {
                let y = tape.matmul(&x, &params[w], true)?;
                tape.add(&y, &params[b])?
            }
        };
    }
    Ok(x)
}

/// Encoder plus optional head with per-component freeze flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelAssembly {
    pub encoder: Encoder,
    pub head: Option<Head>,
    pub freeze_encoder: bool,
    pub freeze_head: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
}

pub fn assemble(encoder: Encoder, head: Option<Head>, freeze_encoder: bool) -> Result<ModelAssembly> {
    if let Some(h) = &head {
        if h.input_dim != encoder.feature_dim() {
            return Err(Error::shape(format!(
                "head {} expects {} input features, encoder {} produces {}",
                h.kind.descriptor(),
                h.input_dim,
                encoder.arch.descriptor(),
                encoder.feature_dim()
            )));
        }
    }
    Ok(ModelAssembly { encoder, head, freeze_encoder, freeze_head: false })
}

impl ModelAssembly {
    /// Fresh encoder and head from one seed.
    pub fn build(arch: EncoderArch, head: Option<HeadKind>, freeze_encoder: bool, seed: u64) -> Result<Self> {
        let encoder = build_encoder(arch, seed)?;
        let head = head.map(|k| build_head(k, arch.feature_dim(), seed)).transpose()?;
        assemble(encoder, head, freeze_encoder)
    }

    pub fn descriptor(&self) -> String {
        let mut d = self.encoder.arch.descriptor();
        if let Some(h) = &self.head {
            d.push('+');
            d.push_str(&h.kind.descriptor());
        }
        d
    }

    pub fn classes(&self) -> Option<usize> {
        self.head.as_ref().and_then(|h| h.kind.classes())
    }

    pub fn param_count(&self) -> ParamCount {
        let enc = self.encoder.param_count();
        let head = self.head.as_ref().map_or(0, Head::param_count);
        let frozen = if self.freeze_encoder { enc } else { 0 } + if self.freeze_head { head } else { 0 };
        ParamCount { total: enc + head, trainable: enc + head - frozen, frozen }
    }

    fn head_params(&self) -> &[Param] {
        self.head.as_ref().map_or(&[], |h| &h.params)
    }

    pub fn trainable_params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        if !self.freeze_encoder {
            out.extend(self.encoder.params.iter().map(|p| p.value.clone()));
        }
        if !self.freeze_head {
            out.extend(self.head_params().iter().map(|p| p.value.clone()));
        }
        out
    }

    pub fn optimizer_state(&self) -> SgdState {
        SgdState::for_params(&self.trainable_params())
    }

    fn bind(&self, tape: &mut Tape, params: &[Param], frozen: bool, handles: &mut Vec<Tensor>) -> Vec<Tensor> {
        params
            .iter()
            .map(|p| {
                if frozen {
                    p.value.detach()
                } else {
                    let leaf = tape.leaf(&p.value);
                    handles.push(leaf.clone());
                    leaf
                }
            })
            .collect()
    }

    /// Encoder features without recording, always in evaluation mode.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params: Vec<Tensor> = self.encoder.params.iter().map(|p| p.value.detach()).collect();
        run_layers(&mut tape, &self.encoder.layers, &params, &self.encoder.running, false, batch, &mut Vec::new())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape(format!("model input must be N×3×H×W, got {s:?}")));
        }
        Ok(())
    }

    /// Full forward pass from images. A frozen encoder always runs in
    /// evaluation mode.
    pub fn forward(&self, tape: &mut Tape, batch: &Tensor, mode: Mode) -> Result<Pass> {
        self.check_batch(batch)?;
        let mut handles = Vec::new();
        let mut stats = Vec::new();
        let enc = self.bind(tape, &self.encoder.params, self.freeze_encoder, &mut handles);
        let train = mode == Mode::Train && !self.freeze_encoder;
        let feats = run_layers(tape, &self.encoder.layers, &enc, &self.encoder.running, train, batch, &mut stats)?;
        let output = self.head_pass(tape, &feats, &mut handles)?;
        Ok(Pass { output, handles, stats })
    }

    /// Forward from precomputed encoder features; only valid when the
    /// encoder is frozen, since it contributes no gradients.
    pub fn forward_features(&self, tape: &mut Tape, features: &Tensor) -> Result<Pass> {
        if !self.freeze_encoder {
            return Err(Error::contract("forward_features needs a frozen encoder"));
        }
        let s = features.shape();
        if s.len() != 2 || s[1] != self.encoder.feature_dim() {
            return Err(Error::shape(format!(
                "features must be N×{}, got {s:?}",
                self.encoder.feature_dim()
            )));
        }
        let mut handles = Vec::new();
        let output = self.head_pass(tape, features, &mut handles)?;
        Ok(Pass { output, handles, stats: Vec::new() })
    }

    fn head_pass(&self, tape: &mut Tape, feats: &Tensor, handles: &mut Vec<Tensor>) -> Result<Tensor> {
        let Some(head) = &self.head else {
            return Ok(feats.clone());
        };
        let hp = self.bind(tape, &head.params, self.freeze_head, handles);
        let out = run_layers(tape, &head.layers, &hp, &[], false, feats, &mut Vec::new())?;
        match head.kind {
            HeadKind::Projection { .. } => tape.l2_normalize_rows(&out),
            _ => Ok(out),
        }
    }

    /// Head output for precomputed features, without recording.
    pub fn infer_features(&self, features: &Tensor) -> Result<Tensor> {
        let frozen = ModelAssembly { freeze_encoder: true, freeze_head: true, ..self.clone() };
        Ok(frozen.forward_features(&mut Tape::new(), features)?.output)
    }

    /// Evaluation-mode output without recording.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let frozen = ModelAssembly { freeze_encoder: true, freeze_head: true, ..self.clone() };
        Ok(frozen.forward(&mut tape, batch, Mode::Eval)?.output)
    }

    /// Applies one optimizer step from the gradients of `pass` and folds the
    /// batch statistics it collected into the running estimates.
    pub fn apply_step(&mut self, pass: &Pass, grads: &Gradients, state: &mut SgdState, hyper: &SgdHyper) -> Result<()> {
        let grad_refs: Vec<&Tensor> = pass
            .handles
            .iter()
            .map(|h| grads.wrt(h).ok_or_else(|| Error::State("missing gradient for a trainable parameter".into())))
            .collect::<Result<_>>()?;
        let mut params = self.trainable_params();
        sgd_step(&mut params, &grad_refs, state, hyper)?;
        let mut it = params.into_iter();
        if !self.freeze_encoder {
            for p in &mut self.encoder.params {
                p.value = it.next().expect("count checked by sgd_step");
            }
        }
        if !self.freeze_head {
            if let Some(h) = &mut self.head {
                for p in &mut h.params {
                    p.value = it.next().expect("count checked by sgd_step");
                }
            }
        }
        self.update_running(&pass.stats);
        Ok(())
    }

    fn update_running(&mut self, stats: &[(usize, BnStats)]) {
        for (slot, s) in stats {
            let r = &mut self.encoder.running[*slot];
            let unbias = if s.count > 1 { s.count as f64 / (s.count - 1) as f64 } else { 1.0 };
            for c in 0..r.mean.len() {
                r.mean[c] = RUNNING_DECAY * r.mean[c] + (1.0 - RUNNING_DECAY) * s.mean[c] as f32;
                r.var[c] = RUNNING_DECAY * r.var[c] + (1.0 - RUNNING_DECAY) * (s.var[c] * unbias) as f32;
            }
        }
    }

    fn encoder_tensors(&self) -> Vec<NamedTensor> {
        let mut out: Vec<NamedTensor> = self
            .encoder
            .params
            .iter()
            .map(|p| NamedTensor { name: p.name.clone(), shape: p.value.shape().to_vec(), values: p.value.data().to_vec() })
            .collect();
        for r in &self.encoder.running {
            let n = r.mean.len();
            out.push(NamedTensor { name: format!("{}.running_mean", r.name), shape: vec![n], values: r.mean.clone() });
            out.push(NamedTensor { name: format!("{}.running_var", r.name), shape: vec![n], values: r.var.clone() });
        }
        out
    }

    pub fn to_checkpoint(&self, step: u64, fingerprint: &str) -> Checkpoint {
        let mut tensors = self.encoder_tensors();
        tensors.extend(self.head_params().iter().map(|p| NamedTensor {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            values: p.value.data().to_vec(),
        }));
        Checkpoint { descriptor: self.descriptor(), step, fingerprint: fingerprint.to_string(), tensors }
    }

    /// Rebuilds the whole assembly a checkpoint describes.
    pub fn from_checkpoint(ckpt: &Checkpoint, freeze_encoder: bool) -> Result<Self> {
        let d = parse_descriptor(&ckpt.descriptor)?;
        let mut m = ModelAssembly::build(d.encoder, d.head, freeze_encoder, 0)?;
        m.load_encoder(ckpt)?;
        m.load_head(ckpt)?;
        Ok(m)
    }

    /// Copies encoder weights and statistics from any checkpoint whose
    /// encoder part matches this model.
    pub fn load_encoder(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let d = parse_descriptor(&ckpt.descriptor)?;
        if d.encoder != self.encoder.arch {
            return Err(Error::Compatibility(format!(
                "checkpoint encoder {} does not match model encoder {}",
                d.encoder.descriptor(),
                self.encoder.arch.descriptor()
            )));
        }
        for p in &mut self.encoder.params {
            p.value = fetch(ckpt, &p.name, p.value.shape())?;
        }
        for r in &mut self.encoder.running {
            let n = [r.mean.len()];
            r.mean = fetch(ckpt, &format!("{}.running_mean", r.name), &n)?.data().to_vec();
            r.var = fetch(ckpt, &format!("{}.running_var", r.name), &n)?.data().to_vec();
        }
        Ok(())
    }

    fn load_head(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if let Some(h) = &mut self.head {
            for p in &mut h.params {
                p.value = fetch(ckpt, &p.name, p.value.shape())?;
            }
        }
        Ok(())
    }
}

fn fetch(ckpt: &Checkpoint, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = ckpt
        .tensor(name)
        .ok_or_else(|| Error::Compatibility(format!("checkpoint {} lacks tensor {name}", ckpt.descriptor)))?;
    if t.shape != shape {
        return Err(Error::Compatibility(format!("tensor {name} has shape {:?}, model expects {shape:?}", t.shape)));
    }
    Tensor::from_vec(shape, t.values.clone())
}
