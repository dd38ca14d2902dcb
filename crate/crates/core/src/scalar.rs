//! Scalar abstraction shared by every network in the crate.
//!
//! All tensor kernels are written against [`Scalar`], so the same model code
//! runs in `f32` for training, `f64` for finite-difference gradient checks,
//! and [`Dual`](crate::dual::Dual) for second-order products.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive};

/// Floating-point element type usable by tensors and the autodiff tape.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Short dtype tag recorded in checkpoint manifests.
    const DTYPE: &'static str;

    /// Converts an `f64` literal; every implementor can represent (a rounding of) any `f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    /// Real part as `f64`, discarding any derivative component.
    fn re_f64(self) -> f64;

    /// `C ← beta·C + A·B` where `A` is `m×k`, `B` is `k×n`, `C` is `m×n`, each
    /// addressed through (row stride, column stride).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    ) {
        naive_gemm(m, k, n, a, a_strides, b, b_strides, beta, c, c_strides)
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (usize, usize), what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "gemm operand {what} out of bounds: {last} >= {len}");
}

/// Reference triple loop. Also serves as the oracle for the blocked kernels.
#[allow(clippy::too_many_arguments)]
pub fn naive_gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + a[i * rsa + p * csa] * b[p * rsb + j * csb];
            }
            let slot = &mut c[i * rsc + j * csc];
            *slot = if beta == T::zero() { acc } else { beta * *slot + acc };
        }
    }
}

macro_rules! impl_native {
    ($t:ty, $tag:expr, $kernel:path) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $tag;

            #[inline]
            fn re_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    for i in 0..m {
                        for j in 0..n {
                            let slot = &mut c[i * c_strides.0 + j * c_strides.1];
                            *slot = if beta == 0.0 { 0.0 } else { beta * *slot };
                        }
                    }
                    return;
                }
                check_extent(a.len(), m, k, a_strides, "A");
                check_extent(b.len(), k, n, b_strides, "B");
                check_extent(c.len(), m, n, c_strides, "C");
                // SAFETY: extents checked above; strides are non-negative and C does not alias A/B
                // because it is borrowed mutably.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_native!(f32, "f32", matrixmultiply::sgemm);
impl_native!(f64, "f64", matrixmultiply::dgemm);
