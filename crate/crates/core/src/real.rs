//! Scalar abstraction shared by the 32-bit training path and the 64-bit
//! oracle/test path.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Layout of one gemm operand: rows, columns and strides.
#[derive(Clone, Copy, Debug)]
pub struct MatRef {
    pub row_stride: isize,
    pub col_stride: isize,
}

impl MatRef {
    /// Row-major, not transposed, with `cols` columns.
    pub fn row_major(cols: usize) -> Self {
        MatRef {
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major matrix that has `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        MatRef {
            row_stride: 1,
            col_stride: cols as isize,
        }
    }
}

pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const NAME: &'static str;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("count representable")
    }

    /// `c = alpha * a(m x k) * b(k x n) + beta * c(m x n)`, `c` row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        la: MatRef,
        b: &[Self],
        lb: MatRef,
        beta: Self,
        c: &mut [Self],
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, l: MatRef) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * l.row_stride + (cols - 1) as isize * l.col_stride;
    assert!(
        last >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                la: MatRef,
                b: &[Self],
                lb: MatRef,
                beta: Self,
                c: &mut [Self],
            ) {
                check_extent(a.len(), m, k, la);
                check_extent(b.len(), k, n, lb);
                assert!(c.len() >= m * n, "gemm output too small");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: extents were checked against the slice lengths above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        la.row_stride,
                        la.col_stride,
                        b.as_ptr(),
                        lb.row_stride,
                        lb.col_stride,
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

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

/// Row-major `a(m x k) * b(k x n)`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        MatRef::row_major(k),
        b,
        MatRef::row_major(n),
        T::zero(),
        &mut c,
    );
    c
}
