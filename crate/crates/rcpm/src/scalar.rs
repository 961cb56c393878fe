//! Scalar abstraction underneath every numerical kernel.
//!
//! All geometry, potential, and flow math in this crate is written once,
//! generically, against [`Scalar`]. The trait is implemented by
//!
//! * plain floats (`f32`, `f64`) for ordinary evaluation,
//! * [`DualN`](crate::dual::DualN) for forward-mode directional derivatives
//!   (tangent-space Jacobians), and
//! * [`Var`](crate::tape::Var) for reverse-mode parameter gradients on a tape.
//!
//! The operation set is deliberately closed: arithmetic, `cos`/`sin`,
//! clamped `arccos`, `exp`/`log`, `sqrt`, `abs`, plus fused `dot` and
//! `log-sum-exp` reductions. Everything the flows need is expressible in
//! these primitives, and keeping the set small is what makes the tape and
//! dual implementations tractable.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Plain floating-point scalars usable as the concrete numeric type of
/// public data structures (`f32` or `f64`).
pub trait Real:
    num_traits::Float + num_traits::FloatConst + Scalar + Default + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// The closed primitive set shared by evaluation, forward-mode, and
/// reverse-mode arithmetic.
pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Whether this scalar records parameter gradients (the reverse-mode
    /// tape and anything layered on it). Numerical-policy branches that
    /// protect training from stiff gradient contributions key off this.
    const TRACKS_PARAMETERS: bool = false;

    fn from_f64(c: f64) -> Self;

    /// The underlying value with all derivative information stripped.
    /// Branch predicates and comparisons go through this.
    fn primal(self) -> f64;

    /// True only for values that are structurally the constant zero
    /// (used to short-circuit derivative bookkeeping, never for math).
    fn is_literal_zero(self) -> bool {
        self.primal() == 0.0
    }

    fn cos(self) -> Self;
    fn sin(self) -> Self;

    /// `arccos` of the argument clamped to `[-1, 1]`. The derivative is zero
    /// at and beyond the clamp boundary by convention; the boundary coincides
    /// with cut-locus handling so smooth code paths never rely on it.
    fn acos_clamped(self) -> Self;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;

    #[inline]
    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    #[inline]
    fn one() -> Self {
        Self::from_f64(1.0)
    }

    /// `self * a + b`. Not fused at the floating-point level so that all
    /// scalar implementations round identically.
    #[inline]
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }

    /// Inner product of two equal-length slices.
    #[inline]
    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = Self::zero();
        for (x, y) in a.iter().zip(b) {
            acc = x.mul_add(*y, acc);
        }
        acc
    }

    /// `log Σᵢ exp(xᵢ)`, stabilized by shifting with the entry of largest
    /// primal value. The shift is an element of the input (not a detached
    /// constant), which keeps derivatives exact.
    fn log_sum_exp(xs: &[Self]) -> Self {
        assert!(!xs.is_empty(), "log_sum_exp of an empty slice");
        let mut k = 0;
        for (i, x) in xs.iter().enumerate() {
            if x.primal() > xs[k].primal() {
                k = i;
            }
        }
        let m = xs[k];
        let mut sum = Self::one(); // exp(xs[k] - m) == 1 exactly
        for (i, x) in xs.iter().enumerate() {
            if i != k {
                sum = sum + (*x - m).exp();
            }
        }
        m + sum.ln()
    }
}

macro_rules! impl_scalar_float {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline]
            fn from_f64(c: f64) -> Self {
                c as $t
            }
            #[inline]
            fn primal(self) -> f64 {
                self as f64
            }
            #[inline]
            fn cos(self) -> Self {
                <$t>::cos(self)
            }
            #[inline]
            fn sin(self) -> Self {
                <$t>::sin(self)
            }
            #[inline]
            fn acos_clamped(self) -> Self {
                <$t>::acos(self.clamp(-1.0, 1.0))
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
        }
    };
}

impl_scalar_float!(f32);
impl_scalar_float!(f64);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acos_clamped_saturates() {
        assert_eq!(1.0000001f64.acos_clamped(), 0.0);
        assert_eq!((-1.0000001f64).acos_clamped(), std::f64::consts::PI);
    }

    #[test]
    fn log_sum_exp_matches_naive_on_moderate_inputs() {
        let xs = [0.3, -1.2, 2.5, 0.0];
        let naive = xs.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((f64::log_sum_exp(&xs) - naive).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_survives_large_magnitudes() {
        let xs = [-1e6, -1e6 + 1.0];
        let got = f64::log_sum_exp(&xs);
        let expected = -1e6 + 1.0 + (1.0 + (-1.0f64).exp()).ln();
        assert!((got - expected).abs() < 1e-9);
    }
}
