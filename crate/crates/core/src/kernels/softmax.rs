//! Softmax cross-entropy with the max-shift (logsumexp) stabilization.

use crate::tensor::{Real, Tensor, TensorError};

/// Loss and logit gradient for one sample.
///
/// Returns `(loss, grad)` with `loss = logsumexp(logits) - logits[label]`
/// and `grad = softmax(logits) - onehot(label)`.
pub fn softmax_ce<T: Real>(logits: &[T], label: usize) -> Result<(T, Vec<T>), TensorError> {
    if logits.is_empty() {
        return Err(TensorError::InvalidArg("softmax over zero classes".into()));
    }
    if label >= logits.len() {
        return Err(TensorError::InvalidArg(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let mut m = logits[0];
    for &v in logits {
        if v > m {
            m = v;
        }
    }
    if !m.is_finite() {
        return Err(TensorError::NonFinite {
            context: "softmax logits".into(),
            index: 0,
        });
    }
    let mut sum = T::zero();
    let mut exps = Vec::with_capacity(logits.len());
    for &v in logits {
        let e = (v - m).exp();
        exps.push(e);
        sum += e;
    }
    let lse = m + sum.ln();
    let loss = lse - logits[label];
    let mut grad = exps;
    for g in &mut grad {
        *g /= sum;
    }
    grad[label] -= T::one();
    Ok((loss, grad))
}

/// Batch softmax cross-entropy with mean reduction.
pub struct BatchXent<T> {
    /// Mean loss over the batch.
    pub loss: T,
    /// `d loss / d logits`, already divided by the batch size.
    pub grad: Tensor<T>,
    /// Softmax probabilities per sample, for scoring and metrics.
    pub probs: Tensor<T>,
}

pub fn softmax_ce_batch<T: Real>(
    logits: &Tensor<T>,
    labels: &[u32],
) -> Result<BatchXent<T>, TensorError> {
    if logits.rank() != 2 {
        return Err(TensorError::InvalidArg(format!(
            "softmax expects [batch, classes] logits, got rank {}",
            logits.rank()
        )));
    }
    let (n, k) = (logits.dim(0), logits.dim(1));
    if labels.len() != n {
        return Err(TensorError::InvalidArg(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut grad = vec![T::zero(); n * k];
    let mut probs = vec![T::zero(); n * k];
    let mut total = T::zero();
    for ni in 0..n {
        let row = &logits.data()[ni * k..(ni + 1) * k];
        let (loss, g) = softmax_ce(row, labels[ni] as usize)?;
        total += loss;
        for (j, gv) in g.iter().enumerate() {
            grad[ni * k + j] = *gv * inv_n;
            probs[ni * k + j] = *gv;
        }
        probs[ni * k + labels[ni] as usize] += T::one();
    }
    Ok(BatchXent {
        loss: total * inv_n,
        grad: Tensor::from_vec(&[n, k], grad)?,
        probs: Tensor::from_vec(&[n, k], probs)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = [0.0f64; 10];
        let (loss, grad) = softmax_ce(&logits, 3).unwrap();
        assert!((loss - 10.0f64.ln()).abs() < 1e-12);
        for (j, g) in grad.iter().enumerate() {
            let want = if j == 3 { 0.1 - 1.0 } else { 0.1 };
            assert!((g - want).abs() < 1e-12);
        }
        // Invariance to a constant shift.
        let shifted = [500.0f64; 10];
        let (loss2, _) = softmax_ce(&shifted, 3).unwrap();
        assert!((loss2 - loss).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logit_has_tiny_loss() {
        let logits = [30.0f64, 0.0, 0.0];
        let (loss, _) = softmax_ce(&logits, 0).unwrap();
        assert!(loss >= 0.0);
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn probabilities_sum_to_one_and_loss_nonnegative() {
        let mut rng = Rng::new(31);
        for _ in 0..200 {
            let k = 2 + (rng.below(9) as usize);
            let logits: Vec<f64> = (0..k).map(|_| rng.range(-8.0, 8.0)).collect();
            let label = rng.below(k as u64) as usize;
            let (loss, grad) = softmax_ce(&logits, label).unwrap();
            assert!(loss >= 0.0);
            // grad + onehot = probabilities
            let sum: f64 = grad.iter().sum::<f64>() + 1.0;
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_matches_fd() {
        let mut rng = Rng::new(32);
        let logits: Vec<f64> = (0..7).map(|_| rng.range(-3.0, 3.0)).collect();
        let (_, grad) = softmax_ce(&logits, 2).unwrap();
        let h = 1e-6;
        for i in 0..7 {
            let mut p = logits.clone();
            p[i] += h;
            let mut m = logits.clone();
            m[i] -= h;
            let fd = (softmax_ce(&p, 2).unwrap().0 - softmax_ce(&m, 2).unwrap().0) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6, "idx {i}");
        }
    }

    #[test]
    fn batch_reduction_is_mean() {
        let logits =
            Tensor::<f64>::from_vec(&[2, 3], vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0]).unwrap();
        let out = softmax_ce_batch(&logits, &[1, 2]).unwrap();
        let (l0, g0) = softmax_ce(&logits.data()[0..3], 1).unwrap();
        let (l1, g1) = softmax_ce(&logits.data()[3..6], 2).unwrap();
        assert!((out.loss - (l0 + l1) / 2.0).abs() < 1e-12);
        for j in 0..3 {
            assert!((out.grad.data()[j] - g0[j] / 2.0).abs() < 1e-12);
            assert!((out.grad.data()[3 + j] - g1[j] / 2.0).abs() < 1e-12);
        }
        // Each probability row sums to one.
        for ni in 0..2 {
            let s: f64 = out.probs.data()[ni * 3..(ni + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_labels() {
        let logits = [0.0f32; 4];
        assert!(softmax_ce(&logits, 4).is_err());
        let t = Tensor::<f32>::zeros(&[2, 4]);
        assert!(softmax_ce_batch(&t, &[0]).is_err());
        assert!(softmax_ce_batch(&t, &[0, 9]).is_err());
    }
}
