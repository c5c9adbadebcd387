use proptest::prelude::*;
use rand::Rng;
use simcl_core::learn::{argmax_rows, distillation_loss, nt_xent_loss, nt_xent_value};
use simcl_core::tensor::{finite_diff_check, standard_suite, Element, GraphBuilder, Tape, Tensor};
use simcl_core::{Result, RngStream};

#[test]
fn every_primitive_passes_finite_differences() {
    let suite = standard_suite(2, 11, 1e-2).unwrap();
    assert!(suite.len() >= 20);
    for g in &suite {
        let single = finite_diff_check::<f32, _>(g, 1e-3).unwrap();
        assert!(single.max_rel_error < 1e-3, "{:?} seed {}: {single:?}", g.kind, g.seed);
        let double = finite_diff_check::<f64, _>(g, 1e-5).unwrap();
        assert!(double.max_rel_error < 1e-6, "{:?} seed {}: {double:?}", g.kind, g.seed);
    }
}

struct Contrast {
    z: Vec<f64>,
    rows: usize,
    tau: f64,
}

impl GraphBuilder for Contrast {
    fn params(&self) -> Vec<(Vec<usize>, Vec<f64>)> {
        vec![(vec![self.rows, self.z.len() / self.rows], self.z.clone())]
    }

    fn build<F: Element>(&self, tape: &mut Tape<F>, p: &[Tensor<F>]) -> Result<Tensor<F>> {
        nt_xent_loss(tape, &p[0], self.tau)
    }
}

struct Distil {
    teacher: Vec<f64>,
    student: Vec<f64>,
    labels: Vec<usize>,
    alpha: f64,
}

impl GraphBuilder for Distil {
    fn params(&self) -> Vec<(Vec<usize>, Vec<f64>)> {
        vec![(vec![self.labels.len(), 3], self.student.clone())]
    }

    fn build<F: Element>(&self, tape: &mut Tape<F>, p: &[Tensor<F>]) -> Result<Tensor<F>> {
        let t = Tensor::from_f64_slice(&[self.labels.len(), 3], &self.teacher)?;
        distillation_loss(tape, &t, &p[0], 2.0, self.alpha, Some(&self.labels))
    }
}

fn normals(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
}

#[test]
fn losses_pass_finite_differences() {
    let mut rng = RngStream::new(5);
    for tau in [0.5, 1.0] {
        let g = Contrast { z: normals(&mut rng, 6 * 4), rows: 6, tau };
        let r = finite_diff_check::<f64, _>(&g, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert!(finite_diff_check::<f32, _>(&g, 1e-3).unwrap().max_rel_error < 1e-3);
    }
    for alpha in [0.0, 0.3, 1.0] {
        let g = Distil { teacher: normals(&mut rng, 12), student: normals(&mut rng, 12), labels: vec![0, 2, 1, 2], alpha };
        let r = finite_diff_check::<f64, _>(&g, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}

/// Every anchor/candidate term written out one scalar at a time.
fn brute_force_nt_xent(z: &[f64], rows: usize, tau: f64) -> f64 {
    let d = z.len() / rows;
    let unit: Vec<Vec<f64>> = z
        .chunks(d)
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let sim = |i: usize, j: usize| {
        let mut s = 0.0;
        for k in 0..d {
            s += unit[i][k] * unit[j][k];
        }
        s / tau
    };
    let mut total = 0.0;
    for i in 0..rows {
        let positive = if i % 2 == 0 { i + 1 } else { i - 1 };
        let mut denom = 0.0;
        for k in 0..rows {
            if k != i {
                denom += sim(i, k).exp();
            }
        }
        total += -(sim(i, positive).exp() / denom).ln();
    }
    total / rows as f64
}

#[test]
fn nt_xent_matches_brute_force_grid() {
    let mut rng = RngStream::new(1);
    for n in 2..=8 {
        for d in [2, 8, 16] {
            for tau in [0.1, 0.5, 1.0] {
                let z = normals(&mut rng, 2 * n * d);
                let want = brute_force_nt_xent(&z, 2 * n, tau);
                let got = nt_xent_value(&Tensor::<f64>::from_f64_slice(&[2 * n, d], &z).unwrap(), tau).unwrap();
                assert!((got - want).abs() < 1e-6, "N={n} d={d} τ={tau}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn collapsed_embeddings_give_log_of_candidates() {
    for n in 2..=8 {
        let z = Tensor::<f64>::from_f64_slice(&[2 * n, 3], &[0.6, 0.0, 0.8].repeat(2 * n)).unwrap();
        let want = ((2 * n - 1) as f64).ln();
        assert!((nt_xent_value(&z, 1.0).unwrap() - want).abs() < 1e-6);
    }
}

#[test]
fn argmax_matches_per_sample_scan() {
    let mut rng = RngStream::new(3);
    let v: Vec<f32> = (0..500).map(|_| rng.random::<f32>()).collect();
    let got = argmax_rows(&Tensor::from_vec(&[100, 5], v.clone()).unwrap());
    for (i, row) in v.chunks(5).enumerate() {
        let mut best = 0;
        for j in 1..5 {
            if row[j] > row[best] {
                best = j;
            }
        }
        assert_eq!(got[i], best);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nt_xent_is_invariant_to_row_scale(seed in any::<u64>(), n in 2usize..6, scale in 0.1f64..10.0) {
        let mut rng = RngStream::new(seed);
        let z = normals(&mut rng, 2 * n * 4);
        let scaled: Vec<f64> = z.iter().map(|v| v * scale).collect();
        let a = nt_xent_value(&Tensor::<f64>::from_f64_slice(&[2 * n, 4], &z).unwrap(), 0.5).unwrap();
        let b = nt_xent_value(&Tensor::<f64>::from_f64_slice(&[2 * n, 4], &scaled).unwrap(), 0.5).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn kd_is_non_negative(t in proptest::collection::vec(-5f64..5.0, 6), s in proptest::collection::vec(-5f64..5.0, 6), tau in 0.5f64..4.0) {
        let (t, s) = (Tensor::<f64>::from_f64_slice(&[2, 3], &t).unwrap(), Tensor::<f64>::from_f64_slice(&[2, 3], &s).unwrap());
        let v = distillation_loss(&mut Tape::new(), &t, &s, tau, 0.0, None).unwrap().item().unwrap();
        prop_assert!(v >= -1e-12);
    }
}
