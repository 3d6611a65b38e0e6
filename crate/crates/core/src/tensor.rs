//! Dense row-major tensors generic over element precision.
//!
//! Training normally runs in `f32`; gradient verification and the numeric
//! test oracles run the identical code paths in `f64` by swapping the type
//! parameter. [`Real`] is the small closed trait that makes that possible.

use crate::rng::Rng;
use num_traits::Float;
use std::fmt;

/// Floating-point element type usable by every kernel in this crate.
pub trait Real:
    Float
    + num_traits::NumAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// General matrix multiply `C = alpha * A B + beta * C` with explicit
    /// strides, dispatching to the precision-matched BLAS-style kernel.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

/// Largest linear index touched by an `r x c` matrix view with the given strides.
fn max_index(r: usize, c: usize, rs: isize, cs: isize) -> usize {
    let row_span = (r as isize - 1).max(0) * rs;
    let col_span = (c as isize - 1).max(0) * cs;
    assert!(rs >= 0 && cs >= 0, "negative strides are not used here");
    (row_span + col_span) as usize
}

macro_rules! impl_real {
    ($ty:ty, $name:expr, $gemm:path) => {
        impl Real for $ty {
            const NAME: &'static str = $name;

            fn from_f64(v: f64) -> Self {
                v as $ty
            }

            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(a.len() > max_index(m, k, rsa, csa), "gemm: A out of bounds");
                assert!(b.len() > max_index(k, n, rsb, csb), "gemm: B out of bounds");
                assert!(c.len() > max_index(m, n, rsc, csc), "gemm: C out of bounds");
                if k == 0 {
                    for i in 0..m {
                        for j in 0..n {
                            let idx = (i as isize * rsc + j as isize * csc) as usize;
                            c[idx] = beta * c[idx];
                        }
                    }
                    return;
                }
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {got}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("zero-sized dimension in shape {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("non-finite value at index {index} in {context}")]
    NonFinite { context: String, index: usize },
    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

/// Dense row-major tensor. The shape product always equals the buffer length.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim(shape.to_vec()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Mean-zero Gaussian fill with standard deviation `sigma`, drawing in
    /// index order so the layout of the consuming stream is well defined.
    pub fn gaussian(shape: &[usize], sigma: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(sigma * rng.normal()))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                got: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn check_finite(&self, context: &str) -> Result<(), TensorError> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite {
                    context: context.to_string(),
                    index: i,
                });
            }
        }
        Ok(())
    }

    pub fn expect_shape(&self, shape: &[usize], context: &str) -> Result<(), TensorError> {
        if self.shape != shape {
            return Err(TensorError::ShapeMismatch {
                context: context.to_string(),
                expected: shape.to_vec(),
                got: self.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<(), TensorError> {
        other.expect_shape(&self.shape, "tensor add")?;
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
        Ok(())
    }

    /// Accumulates `factor * other` into `self`.
    pub fn add_scaled(&mut self, other: &Tensor<T>, factor: T) -> Result<(), TensorError> {
        other.expect_shape(&self.shape, "tensor add_scaled")?;
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += factor * *b;
        }
        Ok(())
    }

    /// Elementwise cast to another precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Sum of squared elements, accumulated in f64.
    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elements]", self.data.len())
        }
    }
}
