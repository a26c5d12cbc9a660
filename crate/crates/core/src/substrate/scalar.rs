use std::fmt::Debug;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Floating-point element type of the differentiable substrate.
///
/// Training runs in `f32`; the gradient-check suites run the same code in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn c(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c += a · b` on strided row/column views, `a: m x k`, `b: k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! strided {
    ($t:ty, $f:ident) => {
        fn gemm_strided(
            m: usize,
            k: usize,
            n: usize,
            a: &[$t],
            rsa: isize,
            csa: isize,
            b: &[$t],
            rsb: isize,
            csb: isize,
            c: &mut [$t],
            rsc: isize,
            csc: isize,
        ) {
            if m == 0 || n == 0 || k == 0 {
                return;
            }
            let span = |r: usize, c: usize, rs: isize, cs: isize| {
                (r - 1) * rs as usize + (c - 1) * cs as usize + 1
            };
            assert!(a.len() >= span(m, k, rsa, csa));
            assert!(b.len() >= span(k, n, rsb, csb));
            assert!(c.len() >= span(m, n, rsc, csc));
            // SAFETY: every index touched lies inside the spans checked above.
            unsafe {
                matrixmultiply::$f(
                    m,
                    k,
                    n,
                    1.0,
                    a.as_ptr(),
                    rsa,
                    csa,
                    b.as_ptr(),
                    rsb,
                    csb,
                    1.0,
                    c.as_mut_ptr(),
                    rsc,
                    csc,
                );
            }
        }
    };
}

impl Real for f32 {
    #[inline]
    fn c(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    strided!(f32, sgemm);
}

impl Real for f64 {
    #[inline]
    fn c(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    strided!(f64, dgemm);
}
