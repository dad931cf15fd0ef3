//! Floating-point element types the engine is generic over.
//!
//! Everything numeric in the crate is written against [`Scalar`], which is
//! implemented for `f32` (training default) and `f64` (gradient checks and
//! reference tests). The trait also routes dense matrix products to the
//! matching `matrixmultiply` kernel.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Storage precision of a model or graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single" | "f32" => Some(Precision::Single),
            "double" | "f64" => Some(Precision::Double),
            _ => None,
        }
    }
}

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;
    /// Width of one value in the checkpoint byte stream.
    const BYTES: usize;

    /// Additive fill for masked attention scores.
    fn mask_fill() -> Self;

    /// Default central-difference step for gradient checks.
    fn fd_eps() -> Self;

    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    fn push_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// Every strided access implied by the dimensions must stay inside the
    /// buffers behind `a`, `b` and `c`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

macro_rules! impl_scalar {
    ($t:ty, $prec:expr, $mask:expr, $eps:expr, $kernel:path) => {
        impl Scalar for $t {
            const PRECISION: Precision = $prec;
            const BYTES: usize = std::mem::size_of::<$t>();

            fn mask_fill() -> Self {
                $mask
            }

            fn fd_eps() -> Self {
                $eps
            }

            fn push_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }

            unsafe fn gemm_raw(
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
            ) {
                $kernel(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_scalar!(f32, Precision::Single, -1e9, 1e-4, matrixmultiply::sgemm);
impl_scalar!(f64, Precision::Double, -1e18, 1e-6, matrixmultiply::dgemm);

/// Strided view of a matrix inside a flat buffer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatView {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        MatView {
            offset,
            rs: cols,
            cs: 1,
        }
    }

    pub fn transposed(self) -> Self {
        MatView {
            offset: self.offset,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// Bounds-checked `c += a * b` (or `c = a * b` when `accumulate` is false)
/// over an `m x k` by `k x n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    av: MatView,
    b: &[T],
    bv: MatView,
    c: &mut [T],
    cv: MatView,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(
        k == 0 || av.last_index(m, k) < a.len(),
        "gemm: lhs view out of bounds"
    );
    assert!(
        k == 0 || bv.last_index(k, n) < b.len(),
        "gemm: rhs view out of bounds"
    );
    assert!(
        cv.last_index(m, n) < c.len(),
        "gemm: output view out of bounds"
    );
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: all three views were checked against their buffers above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}
