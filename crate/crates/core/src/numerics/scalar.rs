use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Element type of a [`Tensor`](super::Tensor).
///
/// Implemented for `f32` (training default) and `f64` (gradient checks).
pub trait Scalar: Float + Sum + Default + Debug + Display + Send + Sync + 'static {
    const NAME: &'static str;

    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` on strided row/column-major views.
    ///
    /// # Safety
    /// Strides and extents must describe in-bounds views of the slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn lit(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn lit(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Which operand of a matrix product is read transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Trans {
    No,
    Yes,
}

/// `out (+)= op(a) * op(b)` where `a` is stored `ar x ac` and `b` is `br x bc`, row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into<T: Scalar>(
    a: &[T],
    ar: usize,
    ac: usize,
    ta: Trans,
    b: &[T],
    br: usize,
    bc: usize,
    tb: Trans,
    out: &mut [T],
    accumulate: bool,
) {
    let (m, k, rsa, csa) = match ta {
        Trans::No => (ar, ac, ac as isize, 1),
        Trans::Yes => (ac, ar, 1, ac as isize),
    };
    let (k2, n, rsb, csb) = match tb {
        Trans::No => (br, bc, bc as isize, 1),
        Trans::Yes => (bc, br, 1, bc as isize),
    };
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(out.len(), m * n, "gemm output size");
    assert_eq!(a.len(), ar * ac);
    assert_eq!(b.len(), br * bc);
    let beta = if accumulate { T::one() } else { T::zero() };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    // SAFETY: extents and strides were checked against slice lengths above.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
