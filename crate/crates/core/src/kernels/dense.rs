//! Fully connected layers, ReLU, and inverted dropout.

use crate::rng::Rng;
use crate::tensor::{Real, Tensor, TensorError};

pub fn relu_fwd<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("relu shape")
}

/// ReLU gradient; the subgradient at exactly zero is taken as zero.
pub fn relu_bwd<T: Real>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    grad_out.expect_shape(input.shape(), "relu grad_out")?;
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Fully connected forward: flattens all input axes after the first into a
/// feature vector. `input` is `[N, ...]`, `weight` is `[O, D]`, optional
/// `bias` is `[O]`; output is `[N, O]`.
pub fn fc_fwd<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>, TensorError> {
    if input.rank() < 2 {
        return Err(TensorError::InvalidArg(
            "fc expects at least a batch axis plus features".into(),
        ));
    }
    let n = input.dim(0);
    let d = input.len() / n;
    let o = weight.dim(0);
    weight.expect_shape(&[o, d], "fc weight")?;
    if let Some(b) = bias {
        b.expect_shape(&[o], "fc bias")?;
    }
    let mut out = vec![T::zero(); n * o];
    // out[N, O] = X[N, D] * W^T[D, O]
    T::gemm(
        n,
        d,
        o,
        T::one(),
        input.data(),
        d as isize,
        1,
        weight.data(),
        1,
        d as isize,
        T::zero(),
        &mut out,
        o as isize,
        1,
    );
    if let Some(b) = bias {
        for ni in 0..n {
            for (oi, bv) in b.data().iter().enumerate() {
                out[ni * o + oi] += *bv;
            }
        }
    }
    Tensor::from_vec(&[n, o], out)
}

/// Fully connected backward. Returns `(grad_input, grad_weight, grad_bias)`,
/// with `grad_bias` present only when the layer has a bias.
pub fn fc_bwd<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>), TensorError> {
    let n = input.dim(0);
    let d = input.len() / n;
    let o = weight.dim(0);
    grad_out.expect_shape(&[n, o], "fc grad_out")?;
    weight.expect_shape(&[o, d], "fc weight")?;

    // grad_input[N, D] = dY[N, O] * W[O, D]
    let mut gi = vec![T::zero(); n * d];
    T::gemm(
        n,
        o,
        d,
        T::one(),
        grad_out.data(),
        o as isize,
        1,
        weight.data(),
        d as isize,
        1,
        T::zero(),
        &mut gi,
        d as isize,
        1,
    );
    // grad_weight[O, D] = dY^T[O, N] * X[N, D]
    let mut gw = vec![T::zero(); o * d];
    T::gemm(
        o,
        n,
        d,
        T::one(),
        grad_out.data(),
        1,
        o as isize,
        input.data(),
        d as isize,
        1,
        T::zero(),
        &mut gw,
        d as isize,
        1,
    );
    let gb = if has_bias {
        let mut b = vec![T::zero(); o];
        for ni in 0..n {
            for oi in 0..o {
                b[oi] += grad_out.data()[ni * o + oi];
            }
        }
        Some(Tensor::from_vec(&[o], b)?)
    } else {
        None
    };
    Ok((
        Tensor::from_vec(input.shape(), gi)?,
        Tensor::from_vec(&[o, d], gw)?,
        gb,
    ))
}

/// Inverted dropout forward.
///
/// In training mode each element is dropped with probability `rate` and
/// survivors are scaled by `1/(1-rate)`, so the expected activation is
/// unchanged and evaluation needs no rescaling. The returned mask holds the
/// applied multiplier per element. Training mode always consumes one uniform
/// draw per element, including at `rate == 0`, which keeps RNG streams
/// aligned between architectures that share a layer prefix. Evaluation mode
/// is the identity and consumes no randomness.
pub fn dropout_fwd<T: Real>(
    input: &Tensor<T>,
    rate: f64,
    train: bool,
    rng: &mut Rng,
) -> Result<(Tensor<T>, Option<Tensor<T>>), TensorError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::InvalidArg(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if !train {
        return Ok((input.clone(), None));
    }
    let keep_scale = T::from_f64(1.0 / (1.0 - rate));
    let mut mask = vec![T::zero(); input.len()];
    let mut out = vec![T::zero(); input.len()];
    for i in 0..input.len() {
        let keep = rng.uniform() >= rate;
        if keep {
            mask[i] = keep_scale;
            out[i] = input.data()[i] * keep_scale;
        }
    }
    Ok((
        Tensor::from_vec(input.shape(), out)?,
        Some(Tensor::from_vec(input.shape(), mask)?),
    ))
}

pub fn dropout_bwd<T: Real>(
    grad_out: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    grad_out.expect_shape(mask.shape(), "dropout grad_out")?;
    let data = grad_out
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&g, &m)| g * m)
        .collect();
    Tensor::from_vec(mask.shape(), data)
}
