//! Max pooling with argmax switches for exact gradient routing.

use crate::tensor::{Real, Tensor, TensorError};

/// Winner positions recorded by the forward pass.
///
/// One entry per output element, in output index order; each entry is the
/// row-major index of the winning element inside its `window x window`
/// patch. Ties go to the lowest index, so replays are unambiguous.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolSwitches {
    pub out_shape: Vec<usize>,
    pub idx: Vec<u32>,
}

fn pool_out_hw(h: usize, w: usize, window: usize, stride: usize) -> Result<(usize, usize), TensorError> {
    if window == 0 || stride == 0 {
        return Err(TensorError::InvalidArg(
            "pool window and stride must be positive".into(),
        ));
    }
    if h < window || w < window {
        return Err(TensorError::InvalidArg(format!(
            "pool window {window} larger than input {h}x{w}"
        )));
    }
    Ok(((h - window) / stride + 1, (w - window) / stride + 1))
}

/// Forward max pool over square windows, no padding; trailing rows/columns
/// that do not fill a window are dropped.
pub fn maxpool_fwd<T: Real>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolSwitches), TensorError> {
    if input.rank() != 4 {
        return Err(TensorError::InvalidArg(format!(
            "pool expects 4-d input, got rank {}",
            input.rank()
        )));
    }
    let (n, c, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (oh, ow) = pool_out_hw(h, w, window, stride)?;
    let x = input.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut idx = vec![0u32; n * c * oh * ow];
    let mut q = 0;
    for nc in 0..n * c {
        let plane = &x[nc * h * w..(nc + 1) * h * w];
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = plane[y * stride * w + xo * stride];
                let mut best_k = 0u32;
                for ki in 0..window {
                    let row = (y * stride + ki) * w + xo * stride;
                    for kj in 0..window {
                        let v = plane[row + kj];
                        // Strict comparison keeps the earliest (lowest
                        // row-major) winner on ties.
                        if v > best {
                            best = v;
                            best_k = (ki * window + kj) as u32;
                        }
                    }
                }
                out[q] = best;
                idx[q] = best_k;
                q += 1;
            }
        }
    }
    Ok((
        Tensor::from_vec(&[n, c, oh, ow], out)?,
        PoolSwitches {
            out_shape: vec![n, c, oh, ow],
            idx,
        },
    ))
}

/// Backward max pool: routes each upstream gradient to its recorded winner.
pub fn maxpool_bwd<T: Real>(
    grad_out: &Tensor<T>,
    switches: &PoolSwitches,
    input_shape: &[usize],
    window: usize,
    stride: usize,
) -> Result<Tensor<T>, TensorError> {
    grad_out.expect_shape(&switches.out_shape, "pool grad_out")?;
    let (n, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let (oh, ow) = pool_out_hw(h, w, window, stride)?;
    if switches.out_shape != [n, c, oh, ow] {
        return Err(TensorError::ShapeMismatch {
            context: "pool switches".into(),
            expected: vec![n, c, oh, ow],
            got: switches.out_shape.clone(),
        });
    }
    let g = grad_out.data();
    let mut grad_in = vec![T::zero(); n * c * h * w];
    let mut q = 0;
    for nc in 0..n * c {
        let plane = &mut grad_in[nc * h * w..(nc + 1) * h * w];
        for y in 0..oh {
            for xo in 0..ow {
                let k = switches.idx[q] as usize;
                let (ki, kj) = (k / window, k % window);
                plane[(y * stride + ki) * w + xo * stride + kj] += g[q];
                q += 1;
            }
        }
    }
    Tensor::from_vec(input_shape, grad_in)
}
