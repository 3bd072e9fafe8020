//! Scalar abstraction shared by every numerical module.
//!
//! All physics is written against [`Real`], which is satisfied by `f32` and
//! `f64`. Routines that need a Hermitian eigensolver or a Cholesky factor
//! additionally require [`nalgebra::RealField`]; inside those functions the
//! two traits expose methods with the same names, so scalar calls are spelled
//! `Float::exp(x)` to stay unambiguous.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_complex::Complex;
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point scalar: f32 or f64.
pub trait Real:
    Float
    + FloatConst
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
    /// Lossy conversion from an f64 literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Numerical floor used to scale tolerances to the working precision.
    #[inline]
    fn tolerance_floor(tol: f64) -> Self {
        let eps = Self::epsilon().as_f64();
        Self::lit(tol.max(1e4 * eps))
    }
}

impl<T> Real for T where
    T: Float
        + FloatConst
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
}

/// Complex scalar over a [`Real`].
pub type Cplx<T> = Complex<T>;

#[inline]
pub fn cplx<T: Real>(re: T, im: T) -> Cplx<T> {
    Complex::new(re, im)
}

#[inline]
pub fn creal<T: Real>(re: T) -> Cplx<T> {
    Complex::new(re, T::zero())
}
