use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{check_finite, Element, Tensor};
use crate::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

const BN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

/// Identity of a recorded value: the owning tape generation plus its
/// position in recording order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

impl NodeId {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dAttrs {
    pub stride: usize,
    pub pad: usize,
}

impl Default for Conv2dAttrs {
    fn default() -> Self {
        Self { stride: 1, pad: 0 }
    }
}

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, F> {
    /// Normalise with the statistics of the current batch.
    Train,
    /// Normalise with frozen running statistics.
    Eval { mean: &'a [F], var: &'a [F] },
}

/// Per-channel batch statistics (biased variance) from a training-mode
/// batch-norm application.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

type Input = Option<NodeId>;

enum Op<F> {
    Leaf,
    Add {
        lhs: Input,
        rhs: Input,
        bias_rows: Option<usize>,
    },
    Mul {
        lhs: Input,
        rhs: Input,
        a: Arc<Vec<F>>,
        b: Arc<Vec<F>>,
    },
    Scale {
        input: Input,
        factor: F,
    },
    MatMul {
        lhs: Input,
        rhs: Input,
        a: Arc<Vec<F>>,
        b: Arc<Vec<F>>,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    Conv2d {
        input: Input,
        weight: Input,
        x: Arc<Vec<F>>,
        w: Arc<Vec<F>>,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: Input,
        argmax: Vec<usize>,
        in_len: usize,
    },
    AvgPoolGlobal {
        input: Input,
        area: usize,
    },
    Relu {
        input: Input,
        out: Arc<Vec<F>>,
    },
    BatchNorm {
        input: Input,
        gamma: Input,
        beta: Input,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        gamma_v: Arc<Vec<F>>,
        channels: usize,
        spatial: usize,
        training: bool,
    },
    L2Normalize {
        input: Input,
        out: Arc<Vec<F>>,
        norms: Vec<F>,
        cols: usize,
    },
    LogSoftmax {
        input: Input,
        out: Arc<Vec<F>>,
        cols: usize,
    },
    MeanAll {
        input: Input,
        count: usize,
    },
    Reshape {
        input: Input,
    },
    ConcatRows {
        parts: Vec<(Input, usize)>,
    },
}

struct Node<F> {
    op: Op<F>,
    len: usize,
    shape: Vec<usize>,
}

/// Recording of primitive applications in topological order.
///
/// A tape supports one backward pass per recorded forward; call
/// [`Tape::reset`] before recording the next one.
pub struct Tape<F: Element = f32> {
    id: u64,
    nodes: Vec<Node<F>>,
    backward_done: bool,
    kink_margin: f64,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
            kink_margin: f64::INFINITY,
        }
    }

    /// Drops every recorded node and starts a new generation. Tensors bound
    /// to the old generation are rejected afterwards.
    pub fn reset(&mut self) {
        *self = Self::new();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance of any ReLU input from zero, or of any max-pool
    /// winner from its runner-up, seen since the last reset.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    /// Registers `t` as a differentiable leaf.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Tensor<F> {
        let node = self.push(Op::Leaf, t.shape().to_vec(), t.len());
        Tensor::shared(t.shape().to_vec(), Arc::clone(t.data_arc()), node)
    }

    fn push(&mut self, op: Op<F>, shape: Vec<usize>, len: usize) -> Option<NodeId> {
        let index = self.nodes.len();
        self.nodes.push(Node { op, len, shape });
        Some(NodeId { tape: self.id, index })
    }

    fn input(&self, t: &Tensor<F>) -> Result<Input> {
        match t.node() {
            None => Ok(None),
            Some(id) if id.tape == self.id && id.index < self.nodes.len() => Ok(Some(id)),
            Some(id) => Err(Error::State(format!(
                "tensor bound to node {id:?} does not belong to this tape"
            ))),
        }
    }

    fn emit(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        data: Vec<F>,
        record: bool,
        op: impl FnOnce(Arc<Vec<F>>) -> Op<F>,
    ) -> Result<Tensor<F>> {
        check_finite(name, &data)?;
        let data = Arc::new(data);
        let node = if record {
            let op = op(Arc::clone(&data));
            self.push(op, shape.clone(), data.len())
        } else {
            None
        };
        Ok(Tensor::shared(shape, data, node))
    }

    /// Elementwise sum of equal shapes, or a bias row broadcast over the
    /// rows of a rank-2 `a` when `b` has shape `[cols]`.
    pub fn add(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        let (lhs, rhs) = (self.input(a)?, self.input(b)?);
        let bias_rows = if a.shape() == b.shape() {
            None
        } else if a.rank() == 2 && b.rank() == 1 && a.shape()[1] == b.shape()[0] {
            Some(a.shape()[1])
        } else {
            return Err(Error::shape(format!(
                "add: {:?} and {:?} do not conform",
                a.shape(),
                b.shape()
            )));
        };
        let data: Vec<F> = match bias_rows {
            None => a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect(),
            Some(cols) => a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + b.data()[i % cols])
                .collect(),
        };
        let record = lhs.is_some() || rhs.is_some();
        self.emit("add", a.shape().to_vec(), data, record, |_| Op::Add {
            lhs,
            rhs,
            bias_rows,
        })
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
        let (lhs, rhs) = (self.input(a)?, self.input(b)?);
        if a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "mul: {:?} and {:?} differ",
                a.shape(),
                b.shape()
            )));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let record = lhs.is_some() || rhs.is_some();
        let (av, bv) = (Arc::clone(a.data_arc()), Arc::clone(b.data_arc()));
        self.emit("mul", a.shape().to_vec(), data, record, |_| Op::Mul {
            lhs,
            rhs,
            a: av,
            b: bv,
        })
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: &Tensor<F>, factor: F) -> Result<Tensor<F>> {
        let input = self.input(a)?;
        let data = a.data().iter().map(|&x| x * factor).collect();
        self.emit("scale", a.shape().to_vec(), data, input.is_some(), |_| {
            Op::Scale { input, factor }
        })
    }

    /// `a · b` for `a` m×k and `b` k×n, or `a · bᵀ` for `b` n×k when
    /// `transpose_b` is set.
    pub fn matmul(&mut self, a: &Tensor<F>, b: &Tensor<F>, transpose_b: bool) -> Result<Tensor<F>> {
        let (lhs, rhs) = (self.input(a)?, self.input(b)?);
        if a.rank() != 2 || b.rank() != 2 {
            return Err(Error::shape(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (kb, n, b_strides) = if transpose_b {
            (b.shape()[1], b.shape()[0], (1, b.shape()[1]))
        } else {
            (b.shape()[0], b.shape()[1], (b.shape()[1], 1))
        };
        if k != kb {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {:?} x {:?}{}",
                a.shape(),
                b.shape(),
                if transpose_b { "^T" } else { "" }
            )));
        }
        let mut data = vec![F::zero(); m * n];
        F::gemm(m, k, n, F::one(), a.data(), (k, 1), b.data(), b_strides, F::zero(), &mut data, (n, 1));
        let record = lhs.is_some() || rhs.is_some();
        let (av, bv) = (Arc::clone(a.data_arc()), Arc::clone(b.data_arc()));
        self.emit("matmul", vec![m, n], data, record, |_| Op::MatMul {
            lhs,
            rhs,
            a: av,
            b: bv,
            m,
            k,
            n,
            transpose_b,
        })
    }

    /// Cross-correlation of an N×C×H×W input with an O×C×k×k kernel,
    /// zero padding on every side.
    pub fn conv2d(&mut self, x: &Tensor<F>, w: &Tensor<F>, attrs: Conv2dAttrs) -> Result<Tensor<F>> {
        let (input, weight) = (self.input(x)?, self.input(w)?);
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shape(format!(
                "conv2d: input {xs:?} and kernel {ws:?} do not conform"
            )));
        }
        if attrs.stride == 0 {
            return Err(Error::shape("conv2d: stride must be at least 1"));
        }
        let kernel = ws[2];
        let (ph, pw) = (xs[2] + 2 * attrs.pad, xs[3] + 2 * attrs.pad);
        if kernel == 0 || ph < kernel || pw < kernel {
            return Err(Error::shape(format!(
                "conv2d: kernel {kernel} larger than padded input {ph}x{pw}"
            )));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_channels: xs[1],
            out_channels: ws[0],
            height: xs[2],
            width: xs[3],
            kernel,
            stride: attrs.stride,
            pad: attrs.pad,
            out_height: (ph - kernel) / attrs.stride + 1,
            out_width: (pw - kernel) / attrs.stride + 1,
        };
        let cols = kernels::im2col(x.data(), &geom);
        let ncols = geom.batch * geom.out_area();
        let mut tmp = vec![F::zero(); geom.out_channels * ncols];
        F::gemm(
            geom.out_channels,
            geom.patch_len(),
            ncols,
            F::one(),
            w.data(),
            (geom.patch_len(), 1),
            &cols,
            (ncols, 1),
            F::zero(),
            &mut tmp,
            (ncols, 1),
        );
        let data = kernels::channels_to_batch(&tmp, geom.batch, geom.out_channels, geom.out_area());
        let shape = vec![geom.batch, geom.out_channels, geom.out_height, geom.out_width];
        let record = input.is_some() || weight.is_some();
        let (xv, wv) = (Arc::clone(x.data_arc()), Arc::clone(w.data_arc()));
        self.emit("conv2d", shape, data, record, |_| Op::Conv2d {
            input,
            weight,
            x: xv,
            w: wv,
            geom,
        })
    }

    /// 2×2 window, stride 2 max pooling of an N×C×H×W tensor.
    pub fn max_pool2(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let input = self.input(x)?;
        let s = x.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape(format!("max_pool2 needs N×C×H×W with H,W ≥ 2, got {s:?}")));
        }
        let (data, argmax, margin) = kernels::max_pool2(x.data(), s[0] * s[1], s[2], s[3]);
        self.kink_margin = self.kink_margin.min(margin);
        let shape = vec![s[0], s[1], s[2] / 2, s[3] / 2];
        let in_len = x.len();
        self.emit("max_pool2", shape, data, input.is_some(), |_| Op::MaxPool2 {
            input,
            argmax,
            in_len,
        })
    }

    /// Mean over the spatial extent: N×C×H×W → N×C.
    pub fn avg_pool_global(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let input = self.input(x)?;
        let s = x.shape();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(Error::shape(format!("avg_pool_global needs non-empty N×C×H×W, got {s:?}")));
        }
        let area = s[2] * s[3];
        let inv = F::of_f64(1.0 / area as f64);
        let data = x
            .data()
            .chunks_exact(area)
            .map(|plane| plane.iter().copied().sum::<F>() * inv)
            .collect();
        self.emit("avg_pool_global", vec![s[0], s[1]], data, input.is_some(), |_| {
            Op::AvgPoolGlobal { input, area }
        })
    }

    pub fn relu(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let input = self.input(x)?;
        let mut margin = f64::INFINITY;
        let data = x
            .data()
            .iter()
            .map(|&v| {
                margin = margin.min(v.abs().as_f64());
                if v > F::zero() {
                    v
                } else {
                    F::zero()
                }
            })
            .collect();
        self.kink_margin = self.kink_margin.min(margin);
        self.emit("relu", x.shape().to_vec(), data, input.is_some(), |out| Op::Relu { input, out })
    }

    /// Per-channel normalisation of N×C or N×C×H×W input followed by the
    /// affine map `gamma·x̂ + beta`. Training mode also returns the batch
    /// statistics so the caller can maintain running estimates.
    pub fn batch_norm(
        &mut self,
        x: &Tensor<F>,
        gamma: &Tensor<F>,
        beta: &Tensor<F>,
        mode: BnMode<'_, F>,
    ) -> Result<(Tensor<F>, Option<BnStats>)> {
        let (input, g_in, b_in) = (self.input(x)?, self.input(gamma)?, self.input(beta)?);
        let s = x.shape();
        if !(s.len() == 2 || s.len() == 4) {
            return Err(Error::shape(format!("batch_norm needs N×C or N×C×H×W, got {s:?}")));
        }
        let (batch, channels) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        if gamma.shape() != [channels] || beta.shape() != [channels] {
            return Err(Error::shape(format!(
                "batch_norm: affine params {:?}/{:?} for {channels} channels",
                gamma.shape(),
                beta.shape()
            )));
        }
        let count = batch * spatial;
        let at = |n: usize, c: usize| (n * channels + c) * spatial;
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if count == 0 {
                    return Err(Error::shape("batch_norm over an empty batch"));
                }
                let mut mean = vec![0.0f64; channels];
                let mut var = vec![0.0f64; channels];
                for c in 0..channels {
                    let mut sum = 0.0;
                    for n in 0..batch {
                        sum += x.data()[at(n, c)..][..spatial].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mu = sum / count as f64;
                    let mut sq = 0.0;
                    for n in 0..batch {
                        sq += x.data()[at(n, c)..][..spatial]
                            .iter()
                            .map(|v| (v.as_f64() - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[c] = mu;
                    var[c] = sq / count as f64;
                }
                let stats = BnStats { mean: mean.clone(), var: var.clone(), count };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::shape("batch_norm: running statistics length mismatch"));
                }
                let m = mean.iter().map(|v| v.as_f64()).collect();
                let v = var.iter().map(|v| v.as_f64()).collect();
                (m, v, None)
            }
        };
        let inv_std: Vec<F> = var.iter().map(|v| F::of_f64(1.0 / (v + BN_EPS).sqrt())).collect();
        let mean_f: Vec<F> = mean.iter().map(|&v| F::of_f64(v)).collect();
        let mut xhat = vec![F::zero(); x.len()];
        let mut data = vec![F::zero(); x.len()];
        for n in 0..batch {
            for c in 0..channels {
                let (mu, is, g, b) = (mean_f[c], inv_std[c], gamma.data()[c], beta.data()[c]);
                let base = at(n, c);
                for i in base..base + spatial {
                    let h = (x.data()[i] - mu) * is;
                    xhat[i] = h;
                    data[i] = g * h + b;
                }
            }
        }
        let record = input.is_some() || g_in.is_some() || b_in.is_some();
        let training = matches!(mode, BnMode::Train);
        let gamma_v = Arc::clone(gamma.data_arc());
        let out = self.emit("batch_norm", s.to_vec(), data, record, |_| Op::BatchNorm {
            input,
            gamma: g_in,
            beta: b_in,
            xhat,
            inv_std,
            gamma_v,
            channels,
            spatial,
            training,
        })?;
        Ok((out, stats))
    }

    /// Scales every row of a rank-2 tensor to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let input = self.input(x)?;
        let cols = rank2_cols("l2_normalize_rows", x)?;
        let floor = F::of_f64(NORM_FLOOR);
        let mut norms = Vec::with_capacity(x.shape()[0]);
        let mut data = Vec::with_capacity(x.len());
        for row in x.data().chunks_exact(cols.max(1)).take(x.shape()[0]) {
            let norm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            let norm = F::of_f64(norm).max(floor);
            norms.push(norm);
            data.extend(row.iter().map(|&v| v / norm));
        }
        self.emit("l2_normalize_rows", x.shape().to_vec(), data, input.is_some(), |out| {
            Op::L2Normalize { input, out, norms, cols }
        })
    }

    /// Row-wise `x − logΣexp(x)`, stabilised by subtracting the row max.
    pub fn log_softmax_rows(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let input = self.input(x)?;
        let cols = rank2_cols("log_softmax_rows", x)?;
        if cols == 0 {
            return Err(Error::shape("log_softmax_rows over zero columns"));
        }
        let mut data = Vec::with_capacity(x.len());
        for row in x.data().chunks_exact(cols) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            data.extend(row.iter().map(|&v| v - lse));
        }
        self.emit("log_softmax_rows", x.shape().to_vec(), data, input.is_some(), |out| {
            Op::LogSoftmax { input, out, cols }
        })
    }

    /// Mean of every element, as a rank-0 tensor.
    pub fn mean_all(&mut self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let input = self.input(x)?;
        let count = x.len();
        if count == 0 {
            return Err(Error::shape("mean_all of an empty tensor"));
        }
        let mean = x.data().iter().copied().sum::<F>() / F::of_f64(count as f64);
        self.emit("mean_all", Vec::new(), vec![mean], input.is_some(), |_| Op::MeanAll {
            input,
            count,
        })
    }

    pub fn reshape(&mut self, x: &Tensor<F>, shape: &[usize]) -> Result<Tensor<F>> {
        let input = self.input(x)?;
        if shape.iter().product::<usize>() != x.len() {
            return Err(Error::shape(format!(
                "reshape {:?} → {shape:?} changes the element count",
                x.shape()
            )));
        }
        // Shares storage; no copy.
        let node = if input.is_some() {
            self.push(Op::Reshape { input }, shape.to_vec(), x.len())
        } else {
            None
        };
        Ok(Tensor::shared(shape.to_vec(), Arc::clone(x.data_arc()), node))
    }

    /// Concatenation along the leading axis.
    pub fn concat_rows(&mut self, parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows of nothing"))?;
        if first.rank() == 0 {
            return Err(Error::shape("concat_rows needs rank ≥ 1"));
        }
        let tail = &first.shape()[1..];
        let mut rows = 0;
        let mut inputs = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for p in parts {
            if p.rank() != first.rank() || &p.shape()[1..] != tail {
                return Err(Error::shape(format!(
                    "concat_rows: {:?} vs {:?}",
                    first.shape(),
                    p.shape()
                )));
            }
            rows += p.shape()[0];
            inputs.push((self.input(p)?, p.len()));
            data.extend_from_slice(p.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        let record = inputs.iter().any(|(i, _)| i.is_some());
        self.emit("concat_rows", shape, data, record, |_| Op::ConcatRows { parts: inputs })
    }

    /// Reverse sweep from a scalar loss. Every leaf of this tape gets an
    /// entry; leaves the loss does not depend on get zeros.
    pub fn backward(&mut self, loss: &Tensor<F>) -> Result<Gradients<F>> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; reset before recording again".into(),
            ));
        }
        if loss.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = self
            .input(loss)?
            .ok_or_else(|| Error::contract("loss does not depend on any tape leaf"))?;
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.index] = Some(vec![F::one()]);
        for idx in (0..=root.index).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            backprop(&node.op, &g, &self.nodes, &mut grads);
        }

        let mut out = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                let data = grads[idx].take().unwrap_or_else(|| vec![F::zero(); node.len]);
                check_finite("backward", &data)?;
                out.insert(NodeId { tape: self.id, index: idx }, Tensor::raw(node.shape.clone(), data));
            }
        }
        Ok(Gradients { by_node: out })
    }
}

fn rank2_cols<F: Element>(name: &str, x: &Tensor<F>) -> Result<usize> {
    if x.rank() != 2 {
        return Err(Error::shape(format!("{name} needs a rank-2 tensor, got {:?}", x.shape())));
    }
    Ok(x.shape()[1])
}

/// Gradient buffer for `id`, zero-initialised on first touch.
fn slot<'g, F: Element>(
    grads: &'g mut [Option<Vec<F>>],
    nodes: &[Node<F>],
    id: Input,
) -> Option<&'g mut Vec<F>> {
    let id = id?;
    let len = nodes[id.index].len;
    Some(grads[id.index].get_or_insert_with(|| vec![F::zero(); len]))
}

fn backprop<F: Element>(op: &Op<F>, g: &[F], nodes: &[Node<F>], grads: &mut [Option<Vec<F>>]) {
    match op {
        Op::Leaf => {}
        Op::Add { lhs, rhs, bias_rows } => {
            if let Some(d) = slot(grads, nodes, *lhs) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
            }
            if let Some(d) = slot(grads, nodes, *rhs) {
                match bias_rows {
                    None => d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g),
                    Some(cols) => {
                        for row in g.chunks_exact(*cols) {
                            d.iter_mut().zip(row).for_each(|(d, &g)| *d = *d + g);
                        }
                    }
                }
            }
        }
        Op::Mul { lhs, rhs, a, b } => {
            if let Some(d) = slot(grads, nodes, *lhs) {
                for i in 0..d.len() {
                    d[i] = d[i] + g[i] * b[i];
                }
            }
            if let Some(d) = slot(grads, nodes, *rhs) {
                for i in 0..d.len() {
                    d[i] = d[i] + g[i] * a[i];
                }
            }
        }
        Op::Scale { input, factor } => {
            if let Some(d) = slot(grads, nodes, *input) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * *factor);
            }
        }
        Op::MatMul { lhs, rhs, a, b, m, k, n, transpose_b } => {
            let (m, k, n) = (*m, *k, *n);
            if let Some(d) = slot(grads, nodes, *lhs) {
                // dA = dC · Bᵀ
                let b_strides = if *transpose_b { (k, 1) } else { (1, n) };
                F::gemm(m, n, k, F::one(), g, (n, 1), b, b_strides, F::one(), d, (k, 1));
            }
            if let Some(d) = slot(grads, nodes, *rhs) {
                if *transpose_b {
                    // d(B stored n×k) = dCᵀ · A
                    F::gemm(n, m, k, F::one(), g, (1, n), a, (k, 1), F::one(), d, (k, 1));
                } else {
                    // dB = Aᵀ · dC
                    F::gemm(k, m, n, F::one(), a, (1, k), g, (n, 1), F::one(), d, (n, 1));
                }
            }
        }
        Op::Conv2d { input, weight, x, w, geom } => {
            let ncols = geom.batch * geom.out_area();
            let patch = geom.patch_len();
            let gt = kernels::batch_to_channels(g, geom.batch, geom.out_channels, geom.out_area());
            if let Some(d) = slot(grads, nodes, *weight) {
                let cols = kernels::im2col(x, geom);
                F::gemm(geom.out_channels, ncols, patch, F::one(), &gt, (ncols, 1), &cols, (1, ncols), F::one(), d, (patch, 1));
            }
            if let Some(d) = slot(grads, nodes, *input) {
                let mut dcols = vec![F::zero(); patch * ncols];
                F::gemm(patch, geom.out_channels, ncols, F::one(), w, (1, patch), &gt, (ncols, 1), F::zero(), &mut dcols, (ncols, 1));
                kernels::col2im_add(&dcols, geom, d);
            }
        }
        Op::MaxPool2 { input, argmax, in_len } => {
            if let Some(d) = slot(grads, nodes, *input) {
                debug_assert_eq!(d.len(), *in_len);
                for (&src, &g) in argmax.iter().zip(g) {
                    d[src] = d[src] + g;
                }
            }
        }
        Op::AvgPoolGlobal { input, area } => {
            if let Some(d) = slot(grads, nodes, *input) {
                let inv = F::of_f64(1.0 / *area as f64);
                for (plane, &g) in d.chunks_exact_mut(*area).zip(g) {
                    plane.iter_mut().for_each(|v| *v = *v + g * inv);
                }
            }
        }
        Op::Relu { input, out } => {
            if let Some(d) = slot(grads, nodes, *input) {
                for i in 0..d.len() {
                    if out[i] > F::zero() {
                        d[i] = d[i] + g[i];
                    }
                }
            }
        }
        Op::BatchNorm { input, gamma, beta, xhat, inv_std, gamma_v, channels, spatial, training } => {
            let (channels, spatial) = (*channels, *spatial);
            let batch = g.len() / (channels * spatial).max(1);
            let at = |n: usize, c: usize| (n * channels + c) * spatial;
            let mut sum_g = vec![F::zero(); channels];
            let mut sum_gx = vec![F::zero(); channels];
            for n in 0..batch {
                for c in 0..channels {
                    let base = at(n, c);
                    for i in base..base + spatial {
                        sum_g[c] = sum_g[c] + g[i];
                        sum_gx[c] = sum_gx[c] + g[i] * xhat[i];
                    }
                }
            }
            if let Some(d) = slot(grads, nodes, *gamma) {
                d.iter_mut().zip(&sum_gx).for_each(|(d, &s)| *d = *d + s);
            }
            if let Some(d) = slot(grads, nodes, *beta) {
                d.iter_mut().zip(&sum_g).for_each(|(d, &s)| *d = *d + s);
            }
            if let Some(d) = slot(grads, nodes, *input) {
                let count = F::of_f64((batch * spatial) as f64);
                for n in 0..batch {
                    for c in 0..channels {
                        let k = gamma_v[c] * inv_std[c];
                        let base = at(n, c);
                        for i in base..base + spatial {
                            let dx = if *training {
                                k * (g[i] - sum_g[c] / count - xhat[i] * sum_gx[c] / count)
                            } else {
                                k * g[i]
                            };
                            d[i] = d[i] + dx;
                        }
                    }
                }
            }
        }
        Op::L2Normalize { input, out, norms, cols } => {
            if let Some(d) = slot(grads, nodes, *input) {
                for (r, &norm) in norms.iter().enumerate() {
                    let y = &out[r * cols..(r + 1) * cols];
                    let gy = &g[r * cols..(r + 1) * cols];
                    let dot: F = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for j in 0..*cols {
                        let idx = r * cols + j;
                        d[idx] = d[idx] + (gy[j] - y[j] * dot) / norm;
                    }
                }
            }
        }
        Op::LogSoftmax { input, out, cols } => {
            if let Some(d) = slot(grads, nodes, *input) {
                for (r, (row, gy)) in out.chunks_exact(*cols).zip(g.chunks_exact(*cols)).enumerate() {
                    let total: F = gy.iter().copied().sum();
                    for j in 0..*cols {
                        let idx = r * cols + j;
                        d[idx] = d[idx] + gy[j] - row[j].exp() * total;
                    }
                }
            }
        }
        Op::MeanAll { input, count } => {
            if let Some(d) = slot(grads, nodes, *input) {
                let share = g[0] / F::of_f64(*count as f64);
                d.iter_mut().for_each(|v| *v = *v + share);
            }
        }
        Op::Reshape { input } => {
            if let Some(d) = slot(grads, nodes, *input) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g);
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &(id, len) in parts {
                if let Some(d) = slot(grads, nodes, id) {
                    d.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, &g)| *d = *d + g);
                }
                offset += len;
            }
        }
    }
}

/// Gradients of one backward sweep, keyed by leaf node.
#[derive(Debug, Clone)]
pub struct Gradients<F: Element = f32> {
    by_node: BTreeMap<NodeId, Tensor<F>>,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.by_node.get(&id)
    }

    /// Gradient with respect to a leaf handle returned by [`Tape::leaf`].
    pub fn wrt(&self, leaf: &Tensor<F>) -> Option<&Tensor<F>> {
        leaf.node().and_then(|id| self.by_node.get(&id))
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor<F>)> {
        self.by_node.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::<f64>::new();
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        let a = t(&[2, 2], &[3., -1., 2.5, 7.]);
        let out = tape.matmul(&eye, &a, false).unwrap();
        assert_eq!(out.data(), a.data());
        assert!(tape.is_empty(), "constants must not be recorded");
    }

    #[test]
    fn log_softmax_uniform_row() {
        let mut tape = Tape::<f64>::new();
        let out = tape.log_softmax_rows(&t(&[1, 4], &[0.; 4])).unwrap();
        for &v in out.data() {
            assert!((v + 4f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_scaling_kernel() {
        let mut tape = Tape::<f32>::new();
        let x = Tensor::full(&[1, 1, 3, 3], 1.0f32);
        let k = Tensor::full(&[1, 1, 1, 1], 2.0f32);
        let out = tape.conv2d(&x, &k, Conv2dAttrs { stride: 1, pad: 0 }).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_padding_and_stride_extents() {
        let mut tape = Tape::<f32>::new();
        let x = Tensor::full(&[2, 3, 8, 8], 1.0f32);
        let k = Tensor::full(&[4, 3, 3, 3], 1.0f32);
        let out = tape.conv2d(&x, &k, Conv2dAttrs { stride: 2, pad: 1 }).unwrap();
        assert_eq!(out.shape(), &[2, 4, 4, 4]);
        // Interior output sees all 27 taps, the top-left corner only 12.
        assert_eq!(out.get(&[0, 0, 1, 1]), Some(27.0));
        assert_eq!(out.get(&[0, 0, 0, 0]), Some(12.0));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(tape.conv2d(&x, &k, Conv2dAttrs::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape = Tape::<f32>::new();
        let out = tape.l2_normalize_rows(&Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap()).unwrap();
        assert!((out.data()[0] - 0.6).abs() < 1e-7);
        assert!((out.data()[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[1], &[3.]));
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.mean_all(&sq).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn inactive_relu_gradient_is_zero() {
        for x0 in [-1.0, 0.0] {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(&t(&[1], &[x0]));
            let r = tape.relu(&x).unwrap();
            let loss = tape.mean_all(&r).unwrap();
            let grads = tape.backward(&loss).unwrap();
            assert_eq!(grads.wrt(&x).unwrap().data(), &[0.0]);
        }
    }

    #[test]
    fn unreachable_leaf_gets_zeros() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::full(&[2], 1.0));
        let unused = tape.leaf(&Tensor::full(&[2, 3], 1.0));
        let loss = tape.mean_all(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let g = grads.wrt(&unused).unwrap();
        assert_eq!(g.shape(), &[2, 3]);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn second_backward_is_state_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::full(&[2], 1.0));
        let loss = tape.mean_all(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert!(matches!(tape.backward(&loss), Err(Error::State(_))));
        tape.reset();
        assert!(matches!(tape.backward(&loss), Err(Error::State(_))), "stale node after reset");
        let x = tape.leaf(&Tensor::full(&[2], 1.0));
        let loss = tape.mean_all(&x).unwrap();
        assert!(tape.backward(&loss).is_ok());
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::full(&[2], 1.0));
        assert!(matches!(tape.backward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn overflow_is_numeric_error() {
        let mut tape = Tape::<f32>::new();
        let x = Tensor::full(&[2], 3.0e38f32);
        assert!(matches!(tape.add(&x, &x), Err(Error::Numeric(_))));
    }

    #[test]
    fn bias_broadcast_and_its_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = tape.leaf(&t(&[3], &[10., 20., 30.]));
        let out = tape.add(&a, &b).unwrap();
        assert_eq!(out.data(), &[11., 22., 33., 14., 25., 36.]);
        let loss = tape.mean_all(&out).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&b).unwrap().data(), &[2. / 6.; 3]);
        assert!(matches!(tape.add(&a, &t(&[2], &[0., 0.])), Err(Error::Shape(_))));
    }

    #[test]
    fn batch_norm_eval_is_affine() {
        let mut tape = Tape::<f64>::new();
        let gamma = t(&[2], &[1.5, -0.5]);
        let beta = t(&[2], &[0.25, 1.0]);
        let mean = [0.3, -0.2];
        let var = [2.0, 0.5];
        let x = t(&[3, 2], &[0.1, 0.2, -1.0, 3.0, 2.0, 0.0]);
        let bn = |tape: &mut Tape<f64>, x: &Tensor<f64>| {
            tape.batch_norm(x, &gamma, &beta, BnMode::Eval { mean: &mean, var: &var }).unwrap().0
        };
        let f0 = bn(&mut tape, &t(&[1, 2], &[0., 0.]));
        let fx = bn(&mut tape, &x);
        let x2: Vec<f64> = x.data().iter().map(|v| 3.0 * v).collect();
        let f3x = bn(&mut tape, &t(&[3, 2], &x2));
        // f(3x) − f(0) == 3·(f(x) − f(0)) for an affine f.
        for (i, (&a, &b)) in f3x.data().iter().zip(fx.data()).enumerate() {
            let c = f0.data()[i % 2];
            assert!(((a - c) - 3.0 * (b - c)).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_train_zero_mean_unit_var() {
        let mut tape = Tape::<f64>::new();
        let x = t(&[2, 1, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let (y, stats) = tape
            .batch_norm(&x, &t(&[1], &[1.]), &t(&[1], &[0.]), BnMode::Train)
            .unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.count, 8);
        assert!((stats.mean[0] - 4.5).abs() < 1e-12);
        assert!((stats.var[0] - 5.25).abs() < 1e-12);
        let mean: f64 = y.data().iter().sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn concat_rows_and_reshape() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t(&[1, 2], &[1., 2.]));
        let b = tape.leaf(&t(&[2, 2], &[3., 4., 5., 6.]));
        let c = tape.concat_rows(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        let r = tape.reshape(&c, &[6]).unwrap();
        let w = t(&[6], &[1., 2., 3., 4., 5., 6.]);
        let p = tape.mul(&r, &w).unwrap();
        let loss = tape.mean_all(&p).unwrap();
        let g = tape.backward(&loss).unwrap();
        let got: Vec<f64> = [g.wrt(&a).unwrap().data(), g.wrt(&b).unwrap().data()].concat();
        for (k, v) in got.iter().enumerate() {
            assert!((v - (k + 1) as f64 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn max_pool_routes_to_first_max() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[1, 1, 2, 2], &[2., 5., 5., 1.]));
        let p = tape.max_pool2(&x).unwrap();
        assert_eq!(p.data(), &[5.]);
        let loss = tape.mean_all(&p).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[0., 1., 0., 0.]);
    }

    #[test]
    fn foreign_tensor_is_rejected() {
        let mut a = Tape::<f32>::new();
        let mut b = Tape::<f32>::new();
        let x = a.leaf(&Tensor::full(&[1], 1.0));
        assert!(matches!(b.relu(&x), Err(Error::State(_))));
    }
}
