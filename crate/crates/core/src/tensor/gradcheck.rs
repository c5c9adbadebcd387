use rand::Rng;

use super::{BnMode, Conv2dAttrs, Element, Tape, Tensor};
use crate::{Error, Result, RngStream};

/// A deterministic scalar-valued graph over a fixed set of parameters.
///
/// `build` must issue the same primitive sequence for every element type so
/// the `f64` replay is a faithful shadow of the analytic run.
pub trait GraphBuilder {
    /// Parameter shapes and initial values.
    fn params(&self) -> Vec<(Vec<usize>, Vec<f64>)>;

    fn build<F: Element>(&self, tape: &mut Tape<F>, params: &[Tensor<F>]) -> Result<Tensor<F>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over parameter tensors of ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-8).
    pub max_rel_error: f64,
    /// Per-parameter relative errors, in parameter order.
    pub per_param: Vec<f64>,
    /// Smallest ReLU / max-pool kink distance seen in the nominal `f64` pass.
    pub kink_margin: f64,
    pub evaluations: usize,
}

fn eval_f64<B: GraphBuilder>(builder: &B, values: &[(Vec<usize>, Vec<f64>)]) -> Result<(f64, f64)> {
    let mut tape = Tape::<f64>::new();
    let params = values
        .iter()
        .map(|(s, v)| Tensor::from_f64_slice(s, v))
        .collect::<Result<Vec<_>>>()?;
    let loss = builder.build(&mut tape, &params)?;
    Ok((loss.item()?, tape.kink_margin()))
}

/// Compares the analytic gradient computed in `F` against central
/// differences evaluated in `f64`.
pub fn finite_diff_check<F: Element, B: GraphBuilder>(builder: &B, eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let init = builder.params();

    let mut tape = Tape::<F>::new();
    let leaves = init
        .iter()
        .map(|(s, v)| Tensor::<F>::from_f64_slice(s, v).map(|t| tape.leaf(&t)))
        .collect::<Result<Vec<_>>>()?;
    let loss = builder.build(&mut tape, &leaves)?;
    let grads = tape.backward(&loss)?;

    let (_, kink_margin) = eval_f64(builder, &init)?;
    let mut per_param = Vec::with_capacity(init.len());
    let mut evaluations = 1;
    let mut probe = init.clone();
    for (pi, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .wrt(leaf)
            .ok_or_else(|| Error::State("leaf missing from gradient map".into()))?
            .to_f64_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let base = init[pi].1[j];
            probe[pi].1[j] = base + eps;
            let (up, _) = eval_f64(builder, &probe)?;
            probe[pi].1[j] = base - eps;
            let (down, _) = eval_f64(builder, &probe)?;
            probe[pi].1[j] = base;
            *slot = (up - down) / (2.0 * eps);
            evaluations += 2;
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        per_param.push(diff / na.max(nn).max(1e-8));
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
        kink_margin,
        evaluations,
    })
}

/// Primitive exercised by a [`RandomGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    AddBroadcast,
    Mul,
    Scale,
    Matmul,
    MatmulTransposed,
    Conv,
    ConvStrided,
    MaxPool,
    AvgPool,
    Relu,
    BatchNormTrain,
    BatchNormTrainSpatial,
    BatchNormEval,
    L2Normalize,
    LogSoftmax,
    ConcatReshape,
    EncoderChain,
}

impl GraphKind {
    pub const ALL: [GraphKind; 17] = [
        GraphKind::AddBroadcast,
        GraphKind::Mul,
        GraphKind::Scale,
        GraphKind::Matmul,
        GraphKind::MatmulTransposed,
        GraphKind::Conv,
        GraphKind::ConvStrided,
        GraphKind::MaxPool,
        GraphKind::AvgPool,
        GraphKind::Relu,
        GraphKind::BatchNormTrain,
        GraphKind::BatchNormTrainSpatial,
        GraphKind::BatchNormEval,
        GraphKind::L2Normalize,
        GraphKind::LogSoftmax,
        GraphKind::ConcatReshape,
        GraphKind::EncoderChain,
    ];
}

/// A small seeded graph ending in `mean(f(params) ⊙ r)` for a fixed random
/// weighting `r`, so every output element carries a distinct gradient.
#[derive(Debug, Clone)]
pub struct RandomGraph {
    pub kind: GraphKind,
    pub seed: u64,
    params: Vec<(Vec<usize>, Vec<f64>)>,
    weights: Vec<f64>,
    consts: Vec<f64>,
}

fn normal(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
}

impl RandomGraph {
    pub fn new(kind: GraphKind, seed: u64) -> Self {
        let mut rng = RngStream::new(seed);
        let n = rng.random_range(2..4usize);
        let c = rng.random_range(2..4usize);
        let d = rng.random_range(3..6usize);
        let p = |rng: &mut RngStream, shape: &[usize]| (shape.to_vec(), normal(rng, shape.iter().product()));
        let params = match kind {
            GraphKind::AddBroadcast => vec![p(&mut rng, &[n, d]), p(&mut rng, &[d])],
            GraphKind::Mul => vec![p(&mut rng, &[n, d]), p(&mut rng, &[n, d])],
            GraphKind::Scale | GraphKind::Relu | GraphKind::L2Normalize | GraphKind::LogSoftmax => {
                vec![p(&mut rng, &[n + 2, d])]
            }
            GraphKind::Matmul => vec![p(&mut rng, &[n, d]), p(&mut rng, &[d, c])],
            GraphKind::MatmulTransposed => vec![p(&mut rng, &[n, d]), p(&mut rng, &[c, d])],
            GraphKind::Conv | GraphKind::ConvStrided => vec![p(&mut rng, &[n, c, 5, 5]), p(&mut rng, &[2, c, 3, 3])],
            GraphKind::MaxPool | GraphKind::AvgPool => vec![p(&mut rng, &[n, c, 4, 4])],
            GraphKind::BatchNormTrain | GraphKind::BatchNormEval => {
                vec![p(&mut rng, &[n + 2, d]), p(&mut rng, &[d]), p(&mut rng, &[d])]
            }
            GraphKind::BatchNormTrainSpatial => vec![p(&mut rng, &[n, c, 3, 3]), p(&mut rng, &[c]), p(&mut rng, &[c])],
            GraphKind::ConcatReshape => vec![p(&mut rng, &[n, d]), p(&mut rng, &[1, d])],
            GraphKind::EncoderChain => vec![
                p(&mut rng, &[n, 2, 6, 6]),
                p(&mut rng, &[3, 2, 3, 3]),
                p(&mut rng, &[3]),
                p(&mut rng, &[3]),
                p(&mut rng, &[c, 3]),
            ],
        };
        let consts = normal(&mut rng, 2 * d.max(c)).into_iter().map(|v| v.abs() + 0.5).collect();
        let weights = normal(&mut rng, 512);
        Self { kind, seed, params, weights, consts }
    }

    fn weighted_mean<F: Element>(&self, tape: &mut Tape<F>, y: &Tensor<F>) -> Result<Tensor<F>> {
        let r: Vec<f64> = self.weights.iter().cycle().take(y.len()).copied().collect();
        let r = Tensor::from_f64_slice(y.shape(), &r)?;
        let prod = tape.mul(y, &r)?;
        tape.mean_all(&prod)
    }
}

impl GraphBuilder for RandomGraph {
    fn params(&self) -> Vec<(Vec<usize>, Vec<f64>)> {
        self.params.clone()
    }

    fn build<F: Element>(&self, tape: &mut Tape<F>, p: &[Tensor<F>]) -> Result<Tensor<F>> {
        let y = match self.kind {
            GraphKind::AddBroadcast => {
                let s = tape.add(&p[0], &p[1])?;
                tape.mul(&s, &s)?
            }
            GraphKind::Mul => tape.mul(&p[0], &p[1])?,
            GraphKind::Scale => {
                let s = tape.scale(&p[0], F::of_f64(-1.7))?;
                tape.mul(&s, &p[0])?
            }
            GraphKind::Matmul => tape.matmul(&p[0], &p[1], false)?,
            GraphKind::MatmulTransposed => tape.matmul(&p[0], &p[1], true)?,
            GraphKind::Conv => tape.conv2d(&p[0], &p[1], Conv2dAttrs { stride: 1, pad: 1 })?,
            GraphKind::ConvStrided => tape.conv2d(&p[0], &p[1], Conv2dAttrs { stride: 2, pad: 0 })?,
            GraphKind::MaxPool => tape.max_pool2(&p[0])?,
            GraphKind::AvgPool => {
                let g = tape.avg_pool_global(&p[0])?;
                tape.mul(&g, &g)?
            }
            GraphKind::Relu => tape.relu(&p[0])?,
            GraphKind::BatchNormTrain | GraphKind::BatchNormTrainSpatial => {
                tape.batch_norm(&p[0], &p[1], &p[2], BnMode::Train)?.0
            }
            GraphKind::BatchNormEval => {
                let d = p[1].len();
                let mean: Vec<F> = self.consts[..d].iter().map(|v| F::of_f64(v - 1.0)).collect();
                let var: Vec<F> = self.consts[d..2 * d].iter().map(|&v| F::of_f64(v)).collect();
                tape.batch_norm(&p[0], &p[1], &p[2], BnMode::Eval { mean: &mean, var: &var })?.0
            }
            GraphKind::L2Normalize => tape.l2_normalize_rows(&p[0])?,
            GraphKind::LogSoftmax => tape.log_softmax_rows(&p[0])?,
            GraphKind::ConcatReshape => {
                let cat = tape.concat_rows(&[&p[0], &p[1], &p[0]])?;
                let flat = tape.reshape(&cat, &[cat.len()])?;
                tape.mul(&flat, &flat)?
            }
            GraphKind::EncoderChain => {
                let h = tape.conv2d(&p[0], &p[1], Conv2dAttrs { stride: 1, pad: 1 })?;
                let (h, _) = tape.batch_norm(&h, &p[2], &p[3], BnMode::Train)?;
                let h = tape.relu(&h)?;
                let h = tape.max_pool2(&h)?;
                let h = tape.avg_pool_global(&h)?;
                let h = tape.matmul(&h, &p[4], true)?;
                tape.log_softmax_rows(&h)?
            }
        };
        self.weighted_mean(tape, &y)
    }
}

/// `per_kind` seeded graphs for every [`GraphKind`]. Seeds whose nominal
/// point sits within `min_margin` of a ReLU or max-pool kink are skipped.
pub fn standard_suite(per_kind: usize, base_seed: u64, min_margin: f64) -> Result<Vec<RandomGraph>> {
    let mut out = Vec::new();
    for (k, kind) in GraphKind::ALL.into_iter().enumerate() {
        let mut seed = base_seed.wrapping_add(1000 * k as u64);
        let mut found = 0;
        while found < per_kind {
            let g = RandomGraph::new(kind, seed);
            let (_, margin) = eval_f64(&g, &g.params)?;
            if margin >= min_margin {
                out.push(g);
                found += 1;
            }
            seed += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Bowl;

    impl GraphBuilder for Bowl {
        fn params(&self) -> Vec<(Vec<usize>, Vec<f64>)> {
            vec![(vec![3], vec![0.5, -1.25, 2.0])]
        }

        fn build<F: Element>(&self, tape: &mut Tape<F>, p: &[Tensor<F>]) -> Result<Tensor<F>> {
            let sq = tape.mul(&p[0], &p[0])?;
            let s = tape.scale(&sq, F::of_f64(1.5))?;
            tape.mean_all(&s)
        }
    }

    #[test]
    fn quadratic_bowl_is_exact() {
        let r = finite_diff_check::<f64, _>(&Bowl, 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        let r = finite_diff_check::<f32, _>(&Bowl, 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.kink_margin, f64::INFINITY);
    }

    #[test]
    fn suite_covers_every_kind() {
        let suite = standard_suite(1, 0, 1e-3).unwrap();
        assert_eq!(suite.len(), GraphKind::ALL.len());
        for g in &suite {
            let r = finite_diff_check::<f64, _>(g, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-6, "{:?}: {r:?}", g.kind);
        }
    }

    #[test]
    fn rejects_bad_step() {
        assert!(finite_diff_check::<f64, _>(&Bowl, 0.0).is_err());
    }
}
