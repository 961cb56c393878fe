//! Forward-mode scalars with `N` simultaneous tangent lanes.
//!
//! [`DualN<S, N>`] carries a primal value and `N` directional derivatives,
//! all of type `S`. Seeding the lanes with an orthonormal tangent basis and
//! running a map once yields every column of its tangent-space Jacobian in a
//! single pass. Nesting over tape variables (`DualN<Var, N>`) is what powers
//! reverse-over-forward differentiation of log-determinants.

use crate::scalar::Scalar;
use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug)]
pub struct DualN<S, const N: usize> {
    pub re: S,
    pub eps: [S; N],
}

impl<S: Scalar, const N: usize> DualN<S, N> {
    #[inline]
    pub fn constant(re: S) -> Self {
        Self { re, eps: [S::zero(); N] }
    }

    #[inline]
    pub fn with_seed(re: S, lane: usize, seed: S) -> Self {
        let mut eps = [S::zero(); N];
        eps[lane] = seed;
        Self { re, eps }
    }

    /// Chain rule for a unary operation: `(f(re), f'(re) * eps)`.
    #[inline]
    fn lift(self, value: S, deriv: S) -> Self {
        let mut eps = [S::zero(); N];
        for i in 0..N {
            eps[i] = deriv * self.eps[i];
        }
        Self { re: value, eps }
    }
}

impl<S: Scalar, const N: usize> Add for DualN<S, N> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        let mut eps = [S::zero(); N];
        for i in 0..N {
            eps[i] = self.eps[i] + o.eps[i];
        }
        Self { re: self.re + o.re, eps }
    }
}

impl<S: Scalar, const N: usize> Sub for DualN<S, N> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        let mut eps = [S::zero(); N];
        for i in 0..N {
            eps[i] = self.eps[i] - o.eps[i];
        }
        Self { re: self.re - o.re, eps }
    }
}

impl<S: Scalar, const N: usize> Mul for DualN<S, N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut eps = [S::zero(); N];
        for i in 0..N {
            eps[i] = self.eps[i].mul_add(o.re, self.re * o.eps[i]);
        }
        Self { re: self.re * o.re, eps }
    }
}

impl<S: Scalar, const N: usize> Div for DualN<S, N> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let q = self.re / o.re;
        let mut eps = [S::zero(); N];
        for i in 0..N {
            eps[i] = (self.eps[i] - q * o.eps[i]) / o.re;
        }
        Self { re: q, eps }
    }
}

impl<S: Scalar, const N: usize> Neg for DualN<S, N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        let mut eps = [S::zero(); N];
        for i in 0..N {
            eps[i] = -self.eps[i];
        }
        Self { re: -self.re, eps }
    }
}

impl<S: Scalar, const N: usize> Scalar for DualN<S, N> {
    const TRACKS_PARAMETERS: bool = S::TRACKS_PARAMETERS;

    #[inline]
    fn from_f64(c: f64) -> Self {
        Self::constant(S::from_f64(c))
    }

    #[inline]
    fn primal(self) -> f64 {
        self.re.primal()
    }

    #[inline]
    fn is_literal_zero(self) -> bool {
        self.re.is_literal_zero() && self.eps.iter().all(|e| e.is_literal_zero())
    }

    #[inline]
    fn cos(self) -> Self {
        self.lift(self.re.cos(), -self.re.sin())
    }

    #[inline]
    fn sin(self) -> Self {
        self.lift(self.re.sin(), self.re.cos())
    }

    #[inline]
    fn acos_clamped(self) -> Self {
        let t = self.re.primal();
        let value = self.re.acos_clamped();
        // Zero derivative at/beyond the clamp boundary.
        let deriv = if t > -1.0 && t < 1.0 {
            -(S::one() / (S::one() - self.re * self.re).sqrt())
        } else {
            S::zero()
        };
        self.lift(value, deriv)
    }

    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.lift(e, e)
    }

    #[inline]
    fn ln(self) -> Self {
        self.lift(self.re.ln(), S::one() / self.re)
    }

    #[inline]
    fn sqrt(self) -> Self {
        let r = self.re.sqrt();
        self.lift(r, S::one() / (r + r))
    }

    #[inline]
    fn abs(self) -> Self {
        let deriv = if self.re.primal() >= 0.0 { S::one() } else { -S::one() };
        self.lift(self.re.abs(), deriv)
    }

    #[inline]
    fn mul_add(self, a: Self, b: Self) -> Self {
        let mut eps = [S::zero(); N];
        for i in 0..N {
            eps[i] = self.eps[i].mul_add(a.re, a.eps[i].mul_add(self.re, b.eps[i]));
        }
        Self { re: self.re.mul_add(a.re, b.re), eps }
    }

    /// Long inner products reduce to fused inner products of the component
    /// slices: `re = <a_re, b_re>`, `eps_l = <a_re, b_eps_l> + <a_eps_l, b_re>`.
    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let n = a.len();
        if n <= 8 {
            // scratch assembly is not worth it for short slices
            let mut acc = Self::from_f64(0.0);
            for (x, y) in a.iter().zip(b) {
                acc = x.mul_add(*y, acc);
            }
            return acc;
        }
        let a_re: Vec<S> = a.iter().map(|d| d.re).collect();
        let b_re: Vec<S> = b.iter().map(|d| d.re).collect();
        let re = S::dot(&a_re, &b_re);
        let mut eps = [S::zero(); N];
        let mut lane: Vec<S> = Vec::with_capacity(n);
        for l in 0..N {
            lane.clear();
            lane.extend(b.iter().map(|d| d.eps[l]));
            let first = S::dot(&a_re, &lane);
            lane.clear();
            lane.extend(a.iter().map(|d| d.eps[l]));
            eps[l] = first + S::dot(&lane, &b_re);
        }
        Self { re, eps }
    }

    /// Log-sum-exp through the primal slice; the tangent lanes contract
    /// against the softmax weights.
    fn log_sum_exp(xs: &[Self]) -> Self {
        assert!(!xs.is_empty(), "log_sum_exp of an empty slice");
        let res: Vec<S> = xs.iter().map(|d| d.re).collect();
        let lse = S::log_sum_exp(&res);
        let w: Vec<S> = res.iter().map(|&r| (r - lse).exp()).collect();
        let mut eps = [S::zero(); N];
        let mut lane: Vec<S> = Vec::with_capacity(xs.len());
        for l in 0..N {
            lane.clear();
            lane.extend(xs.iter().map(|d| d.eps[l]));
            eps[l] = S::dot(&w, &lane);
        }
        Self { re: lse, eps }
    }
}
