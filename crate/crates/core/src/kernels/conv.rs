//! 2-D convolution (cross-correlation, no kernel flip) via im2col and GEMM.

use crate::tensor::{Real, Tensor, TensorError};

/// Column matrix produced by the forward pass; the backward pass reuses it
/// for the weight gradient instead of re-gathering the input.
pub struct ConvCache<T> {
    /// Shape `[C*KH*KW, N*OH*OW]`, row index `(c*KH + ki)*KW + kj`,
    /// column index `(n*OH + oh)*OW + ow`.
    pub cols: Tensor<T>,
}

/// Output spatial size for the given geometry.
pub fn conv_out_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize), TensorError> {
    if stride == 0 {
        return Err(TensorError::InvalidArg("conv stride must be positive".into()));
    }
    if kh == 0 || kw == 0 {
        return Err(TensorError::InvalidArg("conv kernel must be non-empty".into()));
    }
    let hp = h + 2 * pad;
    let wp = w + 2 * pad;
    if hp < kh || wp < kw {
        return Err(TensorError::InvalidArg(format!(
            "conv kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )));
    }
    Ok(((hp - kh) / stride + 1, (wp - kw) / stride + 1))
}

fn im2col<T: Real>(
    input: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor<T> {
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let rows = c * kh * kw;
    let qn = n * oh * ow;
    let mut cols = vec![T::zero(); rows * qn];
    let x = input.data();
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ci * kh + ki) * kw + kj;
                let row = &mut cols[r * qn..(r + 1) * qn];
                for ni in 0..n {
                    let base_in = (ni * c + ci) * h * w;
                    for ohi in 0..oh {
                        let ih = (ohi * stride + ki) as isize - pad as isize;
                        let q0 = (ni * oh + ohi) * ow;
                        if ih < 0 || ih >= h as isize {
                            continue; // stays zero (padding)
                        }
                        let in_row = base_in + ih as usize * w;
                        for owi in 0..ow {
                            let iw = (owi * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            row[q0 + owi] = x[in_row + iw as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[rows, qn], cols).expect("im2col shape")
}

fn col2im<T: Real>(
    grad_cols: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor<T> {
    let qn = n * oh * ow;
    let mut grad_in = vec![T::zero(); n * c * h * w];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ci * kh + ki) * kw + kj;
                let row = &grad_cols[r * qn..(r + 1) * qn];
                for ni in 0..n {
                    let base_in = (ni * c + ci) * h * w;
                    for ohi in 0..oh {
                        let ih = (ohi * stride + ki) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let in_row = base_in + ih as usize * w;
                        let q0 = (ni * oh + ohi) * ow;
                        for owi in 0..ow {
                            let iw = (owi * stride + kj) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            grad_in[in_row + iw as usize] += row[q0 + owi];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], grad_in).expect("col2im shape")
}

/// Forward convolution.
///
/// `input` is `[N, C, H, W]`, `weight` is `[O, C, KH, KW]`, `bias` is `[O]`.
/// Returns the `[N, O, OH, OW]` output plus the column cache when
/// `keep_cache` is set (the cache is required by [`conv2d_bwd`]).
pub fn conv2d_fwd<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
    keep_cache: bool,
) -> Result<(Tensor<T>, Option<ConvCache<T>>), TensorError> {
    if input.rank() != 4 || weight.rank() != 4 {
        return Err(TensorError::InvalidArg(format!(
            "conv expects 4-d input and weight, got ranks {} and {}",
            input.rank(),
            weight.rank()
        )));
    }
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (o, wc, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
    if wc != c {
        return Err(TensorError::ShapeMismatch {
            context: "conv weight channels".into(),
            expected: vec![o, c, kh, kw],
            got: weight.shape().to_vec(),
        });
    }
    bias.expect_shape(&[o], "conv bias")?;
    let (oh, ow) = conv_out_hw(h, w, kh, kw, stride, pad)?;
    let cols = im2col(input, kh, kw, stride, pad, oh, ow);
    let ckk = c * kh * kw;
    let qn = n * oh * ow;

    // One whole-batch GEMM into [O, N*OH*OW], then scatter rows to NCHW.
    let mut flat = vec![T::zero(); o * qn];
    T::gemm(
        o,
        ckk,
        qn,
        T::one(),
        weight.data(),
        ckk as isize,
        1,
        cols.data(),
        qn as isize,
        1,
        T::zero(),
        &mut flat,
        qn as isize,
        1,
    );
    let ohw = oh * ow;
    let mut out = vec![T::zero(); n * o * ohw];
    for oi in 0..o {
        let b = bias.data()[oi];
        for ni in 0..n {
            let src = &flat[oi * qn + ni * ohw..oi * qn + (ni + 1) * ohw];
            let dst = &mut out[(ni * o + oi) * ohw..(ni * o + oi + 1) * ohw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s + b;
            }
        }
    }
    let out = Tensor::from_vec(&[n, o, oh, ow], out)?;
    Ok((out, keep_cache.then_some(ConvCache { cols })))
}

/// Backward convolution. Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv2d_bwd<T: Real>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
    weight: &Tensor<T>,
    cache: &ConvCache<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), TensorError> {
    let (n, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let (o, _, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
    let (oh, ow) = conv_out_hw(h, w, kh, kw, stride, pad)?;
    grad_out.expect_shape(&[n, o, oh, ow], "conv grad_out")?;
    let ckk = c * kh * kw;
    let qn = n * oh * ow;
    let ohw = oh * ow;
    let g = grad_out.data();

    let mut grad_bias = vec![T::zero(); o];
    for ni in 0..n {
        for oi in 0..o {
            let row = &g[(ni * o + oi) * ohw..(ni * o + oi + 1) * ohw];
            let mut acc = T::zero();
            for v in row {
                acc += *v;
            }
            grad_bias[oi] += acc;
        }
    }

    // grad_weight[o, ckk] += grad_out_n[o, ohw] * cols_n^T[ohw, ckk], per sample.
    let mut grad_weight = vec![T::zero(); o * ckk];
    for ni in 0..n {
        T::gemm(
            o,
            ohw,
            ckk,
            T::one(),
            &g[ni * o * ohw..],
            ohw as isize,
            1,
            &cache.cols.data()[ni * ohw..],
            1,
            qn as isize,
            T::one(),
            &mut grad_weight,
            ckk as isize,
            1,
        );
    }

    // grad_cols_n[ckk, ohw] = W^T[ckk, o] * grad_out_n[o, ohw], per sample.
    let mut grad_cols = vec![T::zero(); ckk * qn];
    for ni in 0..n {
        T::gemm(
            ckk,
            o,
            ohw,
            T::one(),
            weight.data(),
            1,
            ckk as isize,
            &g[ni * o * ohw..],
            ohw as isize,
            1,
            T::zero(),
            &mut grad_cols[ni * ohw..],
            qn as isize,
            1,
        );
    }
    let grad_input = col2im(&grad_cols, n, c, h, w, kh, kw, stride, pad, oh, ow);
    Ok((
        grad_input,
        Tensor::from_vec(&[o, c, kh, kw], grad_weight)?,
        Tensor::from_vec(&[o], grad_bias)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Direct six-loop convolution, the independent reference the GEMM path
    /// is checked against.
    fn conv_naive(
        input: &Tensor<f64>,
        weight: &Tensor<f64>,
        bias: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
        let (o, _, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
        let (oh, ow) = conv_out_hw(h, w, kh, kw, stride, pad).unwrap();
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for ni in 0..n {
            for oi in 0..o {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = bias.data()[oi];
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (y * stride + ki) as isize - pad as isize;
                                    let ix = (x * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ((ni * c + ci) * h + iy as usize) * w + ix as usize;
                                    let wi = ((oi * c + ci) * kh + ki) * kw + kj;
                                    acc += input.data()[xi] * weight.data()[wi];
                                }
                            }
                        }
                        out.data_mut()[((ni * o + oi) * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_counts_window() {
        let input = Tensor::<f64>::filled(&[1, 1, 3, 3], 1.0);
        let weight = Tensor::<f64>::filled(&[1, 1, 2, 2], 1.0);
        let bias = Tensor::<f64>::zeros(&[1]);
        let (out, _) = conv2d_fwd(&input, &weight, &bias, 1, 0, false).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn zero_weights_give_bias_everywhere() {
        let mut rng = Rng::new(1);
        let input = Tensor::<f64>::gaussian(&[2, 3, 5, 5], 1.0, &mut rng);
        let weight = Tensor::<f64>::zeros(&[4, 3, 3, 3]);
        let bias = Tensor::<f64>::from_vec(&[4], vec![0.1, -0.2, 0.3, 0.7]).unwrap();
        let (out, _) = conv2d_fwd(&input, &weight, &bias, 1, 1, false).unwrap();
        for ni in 0..2 {
            for oi in 0..4 {
                for p in 0..25 {
                    assert_eq!(out.data()[(ni * 4 + oi) * 25 + p], bias.data()[oi]);
                }
            }
        }
    }

    #[test]
    fn gemm_path_matches_naive_reference() {
        let mut rng = Rng::new(7);
        for &(n, c, h, w, o, k, stride, pad) in &[
            (2usize, 3usize, 7usize, 6usize, 4usize, 3usize, 2usize, 1usize),
            (1, 1, 8, 8, 2, 5, 1, 2),
            (3, 2, 5, 5, 3, 1, 1, 0),
            (2, 4, 6, 7, 5, 3, 3, 0),
        ] {
            let input = Tensor::<f64>::gaussian(&[n, c, h, w], 1.0, &mut rng);
            let weight = Tensor::<f64>::gaussian(&[o, c, k, k], 0.5, &mut rng);
            let bias = Tensor::<f64>::gaussian(&[o], 0.1, &mut rng);
            let (got, _) = conv2d_fwd(&input, &weight, &bias, stride, pad, false).unwrap();
            let want = conv_naive(&input, &weight, &bias, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                let rel = (a - b).abs() / b.abs().max(1.0);
                assert!(rel < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_upstream_grad_zeroes_everything() {
        let mut rng = Rng::new(2);
        let input = Tensor::<f64>::gaussian(&[2, 2, 6, 6], 1.0, &mut rng);
        let weight = Tensor::<f64>::gaussian(&[3, 2, 3, 3], 1.0, &mut rng);
        let bias = Tensor::<f64>::zeros(&[3]);
        let (out, cache) = conv2d_fwd(&input, &weight, &bias, 1, 1, true).unwrap();
        let gz = Tensor::<f64>::zeros(out.shape());
        let (gi, gw, gb) =
            conv2d_bwd(&gz, input.shape(), &weight, &cache.unwrap(), 1, 1).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gw.data().iter().all(|&v| v == 0.0));
        assert!(gb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_output_weight_grad_equals_input() {
        // Full-size kernel, single output pixel, unit upstream gradient:
        // d out / d weight is exactly the input patch.
        let mut rng = Rng::new(3);
        let input = Tensor::<f64>::gaussian(&[1, 2, 4, 4], 1.0, &mut rng);
        let weight = Tensor::<f64>::gaussian(&[1, 2, 4, 4], 1.0, &mut rng);
        let bias = Tensor::<f64>::zeros(&[1]);
        let (out, cache) = conv2d_fwd(&input, &weight, &bias, 1, 0, true).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        let ones = Tensor::<f64>::filled(&[1, 1, 1, 1], 1.0);
        let (_, gw, gb) =
            conv2d_bwd(&ones, input.shape(), &weight, &cache.unwrap(), 1, 0).unwrap();
        for (a, b) in gw.data().iter().zip(input.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(gb.data(), &[1.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let input = Tensor::<f64>::gaussian(&[2, 2, 5, 5], 1.0, &mut rng);
        let weight = Tensor::<f64>::gaussian(&[3, 2, 3, 3], 0.5, &mut rng);
        let bias = Tensor::<f64>::gaussian(&[3], 0.1, &mut rng);
        let g_up = Tensor::<f64>::gaussian(&[2, 3, 3, 3], 1.0, &mut rng);
        // Scalar objective: sum(conv(x, w, b) * g_up).
        let loss = |input: &Tensor<f64>, weight: &Tensor<f64>, bias: &Tensor<f64>| -> f64 {
            let (out, _) = conv2d_fwd(input, weight, bias, 2, 1, false).unwrap();
            out.data().iter().zip(g_up.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = conv2d_fwd(&input, &weight, &bias, 2, 1, true).unwrap();
        let (gi, gw, gb) =
            conv2d_bwd(&g_up, input.shape(), &weight, &cache.unwrap(), 2, 1).unwrap();
        let h = 1e-6;
        let check = |analytic: &Tensor<f64>,
                     param: &Tensor<f64>,
                     eval: &dyn Fn(&Tensor<f64>) -> f64| {
            for i in (0..param.len()).step_by(7) {
                let mut plus = param.clone();
                plus.data_mut()[i] += h;
                let mut minus = param.clone();
                minus.data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
                assert!(rel < 1e-5, "idx {i}: fd {fd} analytic {a}");
            }
        };
        check(&gi, &input, &|t| loss(t, &weight, &bias));
        check(&gw, &weight, &|t| loss(&input, t, &bias));
        check(&gb, &bias, &|t| loss(&input, &weight, t));
    }

    #[test]
    fn rejects_bad_geometry() {
        let input = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let weight = Tensor::<f32>::zeros(&[1, 1, 5, 5]);
        let bias = Tensor::<f32>::zeros(&[1]);
        assert!(conv2d_fwd(&input, &weight, &bias, 1, 0, false).is_err());
        assert!(conv2d_fwd(&input, &weight, &bias, 0, 2, false).is_err());
        let wrong_c = Tensor::<f32>::zeros(&[1, 2, 3, 3]);
        assert!(conv2d_fwd(&input, &wrong_c, &bias, 1, 0, false).is_err());
    }
}
