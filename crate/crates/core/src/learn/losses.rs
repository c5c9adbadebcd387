use crate::tensor::{Element, Tape, Tensor};
use crate::{Error, Result};

/// Added to self-similarities so they drop out of the softmax.
const SELF_MASK: f64 = -1e9;

/// NT-Xent over `2N` embeddings interleaved as `x1ᵢ` at row `2i` and `x2ᵢ`
/// at row `2i + 1`. Rows are renormalised; each anchor's positive is its
/// partner row and its candidates are every other row.
pub fn nt_xent_loss<F: Element>(tape: &mut Tape<F>, z: &Tensor<F>, temperature: f64) -> Result<Tensor<F>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    if z.rank() != 2 {
        return Err(Error::shape(format!("nt_xent_loss needs a 2N×d matrix, got {:?}", z.shape())));
    }
    let rows = z.shape()[0];
    if rows < 4 || rows % 2 != 0 {
        return Err(Error::contract(format!("nt_xent_loss needs an even row count of at least 4, got {rows}")));
    }
    let zn = tape.l2_normalize_rows(z)?;
    let sim = tape.matmul(&zn, &zn, true)?;
    let logits = tape.scale(&sim, F::of_f64(1.0 / temperature))?;
    let mut mask = vec![F::zero(); rows * rows];
    let mut positive = vec![F::zero(); rows * rows];
    for i in 0..rows {
        mask[i * rows + i] = F::of_f64(SELF_MASK);
        positive[i * rows + (i ^ 1)] = F::one();
    }
    let masked = tape.add(&logits, &Tensor::from_vec(&[rows, rows], mask)?)?;
    let logp = tape.log_softmax_rows(&masked)?;
    let picked = tape.mul(&logp, &Tensor::from_vec(&[rows, rows], positive)?)?;
    let mean = tape.mean_all(&picked)?;
    tape.scale(&mean, F::of_f64(-(rows as f64)))
}

/// Forward-only NT-Xent value.
pub fn nt_xent_value<F: Element>(z: &Tensor<F>, temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    Ok(nt_xent_loss(&mut tape, &z.detach(), temperature)?.item()?.as_f64())
}

fn softmax_rows<F: Element>(x: &[F], cols: usize, temperature: f64) -> (Vec<f64>, Vec<f64>) {
    let mut p = Vec::with_capacity(x.len());
    let mut logp = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let scaled: Vec<f64> = row.iter().map(|v| v.as_f64() / temperature).collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in scaled {
            logp.push(v - lse);
            p.push((v - lse).exp());
        }
    }
    (p, logp)
}

/// `mean over the batch of α·CE(labels, student) + (1 − α)·τ²·KL(p_t ‖ p_s)`
/// where `p_t`, `p_s` are the teacher and student softmaxes at temperature
/// `τ`. Teacher logits are constants. With `α = 0` labels are ignored and
/// with `α = 1` the teacher is.
pub fn distillation_loss<F: Element>(
    tape: &mut Tape<F>,
    teacher_logits: &Tensor<F>,
    student_logits: &Tensor<F>,
    temperature: f64,
    alpha: f64,
    labels: Option<&[usize]>,
) -> Result<Tensor<F>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config(format!("distillation temperature must be positive, got {temperature}")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if teacher_logits.shape() != student_logits.shape() || student_logits.rank() != 2 {
        return Err(Error::shape(format!(
            "teacher {:?} and student {:?} logits must be equal N×K matrices",
            teacher_logits.shape(),
            student_logits.shape()
        )));
    }
    let (n, k) = (student_logits.shape()[0], student_logits.shape()[1]);
    let mut terms = Vec::new();
    if alpha > 0.0 {
        let labels = labels.ok_or_else(|| Error::contract("alpha > 0 needs ground-truth labels"))?;
        terms.push((alpha, cross_entropy(tape, student_logits, labels)?));
    }
    if alpha < 1.0 {
        let (p, logp) = softmax_rows(teacher_logits.data(), k, temperature);
        let neg_entropy: f64 = p.iter().zip(&logp).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        let scaled = tape.scale(student_logits, F::of_f64(1.0 / temperature))?;
        let logq = tape.log_softmax_rows(&scaled)?;
        let weights = Tensor::from_vec(&[n, k], p.iter().map(|&v| F::of_f64(v)).collect())?;
        let cross = tape.mul(&logq, &weights)?;
        let cross = tape.mean_all(&cross)?;
        let cross = tape.scale(&cross, F::of_f64(-((n * k) as f64) / n as f64))?;
        let kl = tape.add(&cross, &Tensor::scalar(F::of_f64(neg_entropy)))?;
        terms.push((1.0 - alpha, tape.scale(&kl, F::of_f64(temperature * temperature))?));
    }
    let mut total: Option<Tensor<F>> = None;
    for (w, t) in terms {
        let t = if w == 1.0 { t } else { tape.scale(&t, F::of_f64(w))? };
        total = Some(match total {
            None => t,
            Some(acc) => tape.add(&acc, &t)?,
        });
    }
    Ok(total.expect("at least one term"))
}

/// Mean cross-entropy of raw logits against integer labels.
pub fn cross_entropy<F: Element>(tape: &mut Tape<F>, logits: &Tensor<F>, labels: &[usize]) -> Result<Tensor<F>> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::shape(format!("{} labels for logits {:?}", labels.len(), logits.shape())));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut onehot = vec![F::zero(); n * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::contract(format!("label {l} outside {k} classes")));
        }
        onehot[i * k + l] = F::one();
    }
    let logp = tape.log_softmax_rows(logits)?;
    let picked = tape.mul(&logp, &Tensor::from_vec(&[n, k], onehot)?)?;
    let mean = tape.mean_all(&picked)?;
    tape.scale(&mean, F::of_f64(-(k as f64)))
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows<F: Element>(logits: &Tensor<F>) -> Vec<usize> {
    let k = logits.shape().get(1).copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    #[test]
    fn collapsed_embeddings_give_log_three() {
        let z = t(&[4, 2], &[1., 0., 1., 0., 1., 0., 1., 0.]);
        assert!((nt_xent_value(&z, 1.0).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_pairs_closed_form() {
        let z = t(&[4, 2], &[1., 0., 1., 0., 0., 1., 0., 1.]);
        let want = (1.0 + 2.0 * (-1f64).exp()).ln();
        assert!((nt_xent_value(&z, 1.0).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn nt_xent_argument_errors() {
        let z = t(&[4, 2], &[1., 0., 1., 0., 1., 0., 1., 0.]);
        assert!(matches!(nt_xent_value(&z, 0.0), Err(Error::Config(_))));
        assert!(matches!(nt_xent_value(&t(&[2, 2], &[1., 0., 0., 1.]), 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn kd_identical_logits_is_zero() {
        let l = t(&[2, 3], &[0.3, -1.0, 2.0, 0.0, 0.5, 0.5]);
        for tau in [0.5, 1.0, 2.0] {
            let v = distillation_loss(&mut Tape::new(), &l, &l, tau, 0.0, None).unwrap().item().unwrap();
            assert!(v.abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn kd_two_class_example() {
        let (te, st) = (t(&[1, 2], &[2., 0.]), t(&[1, 2], &[0., 2.]));
        let v = distillation_loss(&mut Tape::new(), &te, &st, 1.0, 0.0, None).unwrap().item().unwrap();
        assert!((v - 1.523_188_311_911_53).abs() < 1e-9, "{v}");
    }

    #[test]
    fn alpha_one_is_plain_cross_entropy() {
        let st = t(&[2, 3], &[0.3, -1.0, 2.0, 0.0, 0.5, 0.5]);
        let labels = [2, 0];
        let ce = cross_entropy(&mut Tape::new(), &st, &labels).unwrap().item().unwrap();
        for te in [t(&[2, 3], &[0.; 6]), t(&[2, 3], &[9., -3., 1., 4., 4., 0.])] {
            let v = distillation_loss(&mut Tape::new(), &te, &st, 2.0, 1.0, Some(&labels)).unwrap().item().unwrap();
            assert_eq!(v, ce);
        }
    }

    #[test]
    fn alpha_without_labels_is_contract_error() {
        let l = t(&[1, 2], &[0., 1.]);
        assert!(matches!(distillation_loss(&mut Tape::new(), &l, &l, 1.0, 0.5, None), Err(Error::Contract(_))));
        let other = t(&[2, 1], &[0., 1.]);
        assert!(matches!(distillation_loss(&mut Tape::new(), &l, &other, 1.0, 0.0, None), Err(Error::Shape(_))));
    }

    #[test]
    fn argmax_ties_go_low() {
        let l = t(&[3, 3], &[0., 0., 0., 1., 3., 3., -1., -2., -1.]);
        assert_eq!(argmax_rows(&l), vec![0, 1, 0]);
    }
}
