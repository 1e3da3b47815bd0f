//! Scalar types a [`crate::GraphOf`] can compute in.
//!
//! Models train in `f32`; `f64` evaluates the same graphs when a
//! finite-difference check needs headroom below `f32` rounding.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;

use crate::tensor::{Array, Tensor};

pub trait Real: Float + Sum + AddAssign + MulAssign + Default + Debug + Send + Sync + 'static {
    fn of_f32(v: f32) -> Self;
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_tensor(t: Tensor) -> Array<Self>;

    /// `c = a · b + beta · c` on strided operands; see `kernels::gemm`.
    ///
    /// # Safety
    /// Every strided access must lie inside the pointed-to buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
    );
}

impl Real for f32 {
    fn of_f32(v: f32) -> Self {
        v
    }

    fn of_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn from_tensor(t: Tensor) -> Array<Self> {
        t
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
    }
}

impl Real for f64 {
    fn of_f32(v: f32) -> Self {
        v as f64
    }

    fn of_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn from_tensor(t: Tensor) -> Array<Self> {
        t.cast()
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1);
    }
}
