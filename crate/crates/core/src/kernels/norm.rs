//! Batch normalization over the channel axis.
//!
//! Training mode normalizes with the current batch's statistics (biased
//! variance); evaluation mode normalizes with stored running statistics.
//! Channel sums are accumulated in f64 in fixed order regardless of the
//! working precision, which keeps reruns bit-identical.

use crate::tensor::{Real, Tensor, TensorError};

/// Per-channel statistics saved by the training forward pass.
pub struct BnCache<T> {
    pub mean: Tensor<T>,
    /// Biased batch variance, the quantity folded into the running average.
    pub var: Tensor<T>,
    pub invstd: Tensor<T>,
}

/// Interprets a tensor as `[N, C, spatial]`; rank 2 means `spatial == 1`.
fn ncs(t: &Tensor<impl Real>, what: &str) -> Result<(usize, usize, usize), TensorError> {
    match t.rank() {
        2 => Ok((t.dim(0), t.dim(1), 1)),
        4 => Ok((t.dim(0), t.dim(1), t.dim(2) * t.dim(3))),
        r => Err(TensorError::InvalidArg(format!(
            "{what}: batchnorm expects rank 2 or 4, got rank {r}"
        ))),
    }
}

pub fn batchnorm_fwd_train<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BnCache<T>), TensorError> {
    let (n, c, s) = ncs(input, "input")?;
    gamma.expect_shape(&[c], "batchnorm gamma")?;
    beta.expect_shape(&[c], "batchnorm beta")?;
    let m = (n * s) as f64;
    let x = input.data();

    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut invstd = vec![T::zero(); c];
    for ci in 0..c {
        let mut sum = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for p in 0..s {
                sum += x[base + p].as_f64();
            }
        }
        let mu = sum / m;
        let mut sq = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for p in 0..s {
                let d = x[base + p].as_f64() - mu;
                sq += d * d;
            }
        }
        let v = sq / m;
        mean[ci] = T::from_f64(mu);
        var[ci] = T::from_f64(v);
        invstd[ci] = T::from_f64(1.0 / (v + eps).sqrt());
    }

    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * s;
            let (mu, istd) = (mean[ci], invstd[ci]);
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            for p in 0..s {
                out[base + p] = g * (x[base + p] - mu) * istd + b;
            }
        }
    }
    Ok((
        Tensor::from_vec(input.shape(), out)?,
        BnCache {
            mean: Tensor::from_vec(&[c], mean)?,
            var: Tensor::from_vec(&[c], var)?,
            invstd: Tensor::from_vec(&[c], invstd)?,
        },
    ))
}

pub fn batchnorm_fwd_eval<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>, TensorError> {
    let (n, c, s) = ncs(input, "input")?;
    gamma.expect_shape(&[c], "batchnorm gamma")?;
    beta.expect_shape(&[c], "batchnorm beta")?;
    running_mean.expect_shape(&[c], "batchnorm running mean")?;
    running_var.expect_shape(&[c], "batchnorm running var")?;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for ci in 0..c {
        let mu = running_mean.data()[ci];
        let istd = T::from_f64(1.0 / (running_var.data()[ci].as_f64() + eps).sqrt());
        let (g, b) = (gamma.data()[ci], beta.data()[ci]);
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for p in 0..s {
                out[base + p] = g * (x[base + p] - mu) * istd + b;
            }
        }
    }
    Tensor::from_vec(input.shape(), out)
}

/// Exponential running-statistics update: `momentum * old + (1-momentum) * batch`.
pub fn bn_running_update<T: Real>(
    old: &Tensor<T>,
    batch_stat: &Tensor<T>,
    momentum: f64,
) -> Result<Tensor<T>, TensorError> {
    batch_stat.expect_shape(old.shape(), "running stat update")?;
    let m = T::from_f64(momentum);
    let k = T::from_f64(1.0 - momentum);
    let data = old
        .data()
        .iter()
        .zip(batch_stat.data())
        .map(|(&o, &b)| m * o + k * b)
        .collect();
    Tensor::from_vec(old.shape(), data)
}

/// Backward pass for training mode. Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_bwd_train<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BnCache<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), TensorError> {
    grad_out.expect_shape(input.shape(), "batchnorm grad_out")?;
    let (n, c, s) = ncs(input, "input")?;
    let m = (n * s) as f64;
    let x = input.data();
    let g = grad_out.data();

    let mut grad_gamma = vec![T::zero(); c];
    let mut grad_beta = vec![T::zero(); c];
    let mut grad_in = vec![T::zero(); x.len()];
    for ci in 0..c {
        let mu = cache.mean.data()[ci];
        let istd = cache.invstd.data()[ci];
        let mut dg = 0.0f64;
        let mut db = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for p in 0..s {
                let xhat = ((x[base + p] - mu) * istd).as_f64();
                let dy = g[base + p].as_f64();
                dg += dy * xhat;
                db += dy;
            }
        }
        grad_gamma[ci] = T::from_f64(dg);
        grad_beta[ci] = T::from_f64(db);
        // dx = gamma*istd/m * (m*dy - sum(dy) - xhat * sum(dy*xhat))
        let scale = gamma.data()[ci].as_f64() * istd.as_f64() / m;
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for p in 0..s {
                let xhat = ((x[base + p] - mu) * istd).as_f64();
                let dy = g[base + p].as_f64();
                grad_in[base + p] = T::from_f64(scale * (m * dy - db - xhat * dg));
            }
        }
    }
    Ok((
        Tensor::from_vec(input.shape(), grad_in)?,
        Tensor::from_vec(&[c], grad_gamma)?,
        Tensor::from_vec(&[c], grad_beta)?,
    ))
}

/// Backward pass for evaluation mode, where the normalizer is a constant
/// affine map built from the running statistics.
pub fn batchnorm_bwd_eval<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), TensorError> {
    grad_out.expect_shape(input.shape(), "batchnorm grad_out")?;
    let (n, c, s) = ncs(input, "input")?;
    let x = input.data();
    let g = grad_out.data();
    let mut grad_gamma = vec![T::zero(); c];
    let mut grad_beta = vec![T::zero(); c];
    let mut grad_in = vec![T::zero(); x.len()];
    for ci in 0..c {
        let mu = running_mean.data()[ci];
        let istd = T::from_f64(1.0 / (running_var.data()[ci].as_f64() + eps).sqrt());
        let gtimes = gamma.data()[ci] * istd;
        let mut dg = 0.0f64;
        let mut db = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for p in 0..s {
                let dy = g[base + p];
                let xhat = (x[base + p] - mu) * istd;
                dg += (dy * xhat).as_f64();
                db += dy.as_f64();
                grad_in[base + p] = dy * gtimes;
            }
        }
        grad_gamma[ci] = T::from_f64(dg);
        grad_beta[ci] = T::from_f64(db);
    }
    Ok((
        Tensor::from_vec(input.shape(), grad_in)?,
        Tensor::from_vec(&[c], grad_gamma)?,
        Tensor::from_vec(&[c], grad_beta)?,
    ))
}
