//! Floating-point element types the engine runs on.
//!
//! Training uses `f32`; gradient verification runs the same code in `f64`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c`, all row-major.
    ///
    /// `op(a)` is `m x k`, `op(b)` is `k x n`. When `trans_a` is set, `a` is stored as `k x m`;
    /// likewise `b` is stored as `n x k` when `trans_b` is set.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // logical (rows x cols); storage is (cols x rows) when transposed
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                // SAFETY: the bounds of every operand were checked against the strides above.
                unsafe {
                    $f(
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
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
