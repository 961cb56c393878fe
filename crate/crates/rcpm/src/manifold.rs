//! Spheres, circles, and their finite products (tori), with closed-form
//! exponential/logarithm maps, intrinsic distance, transport cost,
//! orthonormal tangent bases, uniform sampling, and projection.
//!
//! On the unit sphere `S^n` embedded in `R^{n+1}`:
//!
//! ```text
//! exp_x(v) = x cos‖v‖ + (v/‖v‖) sin‖v‖
//! d(x, y)  = arccos(xᵀy)
//! c(x, y)  = ½ d(x, y)²
//! ```
//!
//! Products apply the factor maps slice-wise and add squared distances.
//! All kernels are generic over [`Scalar`], so the same code path serves
//! plain evaluation, forward-mode Jacobians, and tape recording.

use crate::avec::AVec;
use crate::error::{Error, Result};
use crate::scalar::{Real, Scalar};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Tolerance below which two points count as antipodal on a sphere factor:
/// `x·y <= -1 + CUT_LOCUS_TOL` raises [`Error::CutLocus`].
pub const CUT_LOCUS_TOL: f64 = 1e-9;

/// Serializable description of a manifold.
///
/// `{"kind":"sphere","n":2}` or `{"kind":"product","factors":[...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ManifoldDescriptor {
    Sphere { n: usize },
    Product { factors: Vec<ManifoldDescriptor> },
}

impl ManifoldDescriptor {
    pub fn sphere(n: usize) -> Self {
        ManifoldDescriptor::Sphere { n }
    }

    /// The circle `S^1`.
    pub fn circle() -> Self {
        ManifoldDescriptor::Sphere { n: 1 }
    }

    /// The torus `T^2 = S^1 x S^1`.
    pub fn torus2() -> Self {
        ManifoldDescriptor::Product { factors: vec![Self::circle(), Self::circle()] }
    }

    /// Flattens nested products and validates factor dimensions.
    pub fn build(&self) -> Result<Manifold> {
        let mut factor_dims = Vec::new();
        self.collect(&mut factor_dims)?;
        if factor_dims.is_empty() {
            return Err(Error::InvalidConfig("product manifold has no factors".into()));
        }
        let ambient_dim: usize = factor_dims.iter().sum();
        if ambient_dim > crate::avec::MAX_AMBIENT {
            return Err(Error::InvalidConfig(format!(
                "ambient dimension {ambient_dim} exceeds supported maximum {}",
                crate::avec::MAX_AMBIENT
            )));
        }
        let intrinsic_dim = ambient_dim - factor_dims.len();
        let mut offsets = Vec::with_capacity(factor_dims.len());
        let mut off = 0;
        for &d in &factor_dims {
            offsets.push(off);
            off += d;
        }
        let diameter = (std::f64::consts::PI.powi(2) * factor_dims.len() as f64).sqrt();
        Ok(Manifold {
            descriptor: self.clone(),
            factor_dims,
            offsets,
            ambient_dim,
            intrinsic_dim,
            diameter,
        })
    }

    fn collect(&self, out: &mut Vec<usize>) -> Result<()> {
        match self {
            ManifoldDescriptor::Sphere { n } => {
                if *n < 1 {
                    return Err(Error::InvalidConfig("sphere dimension must be >= 1".into()));
                }
                out.push(n + 1);
                Ok(())
            }
            ManifoldDescriptor::Product { factors } => {
                for f in factors {
                    f.collect(out)?;
                }
                Ok(())
            }
        }
    }
}

/// A compiled manifold: a flat list of sphere factors with precomputed
/// slice offsets and derived dimensions.
#[derive(Clone, Debug)]
pub struct Manifold {
    descriptor: ManifoldDescriptor,
    factor_dims: Vec<usize>, // ambient dimension per sphere factor (n + 1)
    offsets: Vec<usize>,
    ambient_dim: usize,
    intrinsic_dim: usize,
    diameter: f64,
}

impl PartialEq for Manifold {
    fn eq(&self, other: &Self) -> bool {
        self.factor_dims == other.factor_dims
    }
}

impl Manifold {
    pub fn descriptor(&self) -> &ManifoldDescriptor {
        &self.descriptor
    }

    /// Ambient embedding dimension `D`.
    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    /// Intrinsic dimension `d`.
    pub fn intrinsic_dim(&self) -> usize {
        self.intrinsic_dim
    }

    /// Diameter `sup d(x, y)`; `pi` for a sphere, `pi * sqrt(k)` for a
    /// product of `k` factors.
    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// `(offset, ambient_dim)` of each sphere factor's coordinate slice.
    pub fn factor_slices(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.offsets.iter().copied().zip(self.factor_dims.iter().copied())
    }

    pub fn n_factors(&self) -> usize {
        self.factor_dims.len()
    }

    /// Riemannian volume, the product of factor sphere areas.
    pub fn volume(&self) -> f64 {
        self.factor_dims.iter().map(|&d| sphere_area(d)).product()
    }

    /// Log-density of the normalized volume measure: `-ln(volume)`.
    pub fn uniform_log_density(&self) -> f64 {
        -self.volume().ln()
    }
}

/// Surface area of the unit sphere with ambient dimension `d`, i.e.
/// `vol(S^{d-1}) = 2 pi^{d/2} / Gamma(d/2)`.
fn sphere_area(ambient: usize) -> f64 {
    2.0 * std::f64::consts::PI.powf(ambient as f64 / 2.0) / gamma_half(ambient)
}

/// `Gamma(k/2)` by the half-integer recurrence.
fn gamma_half(k: usize) -> f64 {
    match k {
        1 => std::f64::consts::PI.sqrt(),
        2 => 1.0,
        _ => (k as f64 / 2.0 - 1.0) * gamma_half(k - 2),
    }
}

// ---------------------------------------------------------------------------
// Scalar-generic kernels
// ---------------------------------------------------------------------------

/// `theta / sin(theta)` expressed through `t = cos(theta)`, with a series
/// branch near `t = 1` where the direct quotient is 0/0.
#[inline]
pub(crate) fn sphere_log_scale<S: Scalar>(t: S) -> S {
    let tp = t.primal();
    if tp > 1.0 - 1e-6 {
        // theta/sin(theta) = 1 + w/3 + 2w^2/15 + O(w^3), w = 1 - t
        let w = S::one() - t;
        let w2 = w * w;
        S::one() + w * S::from_f64(1.0 / 3.0) + w2 * S::from_f64(2.0 / 15.0)
    } else {
        let theta = t.acos_clamped();
        theta / theta.sin()
    }
}

/// Squared-distance-halved transport cost on one sphere factor as a function
/// of `t = x·y`. A series branch near `t = 1` keeps the derivative finite
/// where `arccos` alone would produce 0 * inf.
#[inline]
pub(crate) fn sphere_cost<S: Scalar>(t: S) -> S {
    let tp = t.primal();
    if tp >= 1.0 {
        S::zero()
    } else if tp > 1.0 - 1e-6 {
        // theta^2/2 = w + w^2/6 + O(w^3), w = 1 - t
        let w = S::one() - t;
        w + w * w * S::from_f64(1.0 / 6.0)
    } else {
        let theta = t.acos_clamped();
        theta * theta * S::from_f64(0.5)
    }
}

/// Cost and log-map scale of one sphere factor from a single shared
/// `arccos`; branch-compatible with [`sphere_cost`] and
/// [`sphere_log_scale`].
#[inline]
pub(crate) fn sphere_cost_and_log_scale<S: Scalar>(t: S) -> (S, S) {
    let tp = t.primal();
    if tp > 1.0 - 1e-6 {
        let w = S::one() - t;
        let w2 = w * w;
        let cost = if tp >= 1.0 { S::zero() } else { w + w2 * S::from_f64(1.0 / 6.0) };
        let scale = S::one() + w * S::from_f64(1.0 / 3.0) + w2 * S::from_f64(2.0 / 15.0);
        (cost, scale)
    } else {
        let theta = t.acos_clamped();
        (theta * theta * S::from_f64(0.5), theta / theta.sin())
    }
}

pub(crate) fn exp_map_k<S: Scalar>(m: &Manifold, x: &[S], v: &[S]) -> AVec<S> {
    let mut out = AVec::zeros(m.ambient_dim);
    for (off, dim) in m.factor_slices() {
        let xf = &x[off..off + dim];
        let vf = &v[off..off + dim];
        let of = &mut out[off..off + dim];
        if vf.iter().all(|c| c.is_literal_zero()) {
            // exp_x(0) = x, bit-exactly
            of.copy_from_slice(xf);
            continue;
        }
        let nsq = S::dot(vf, vf);
        let norm_p = nsq.primal().sqrt();
        if norm_p < 1e-8 {
            // series-safe: x + v, then retract; avoids 0/0 in v/||v||
            let mut shifted = AVec::<S>::zeros(dim);
            for i in 0..dim {
                shifted[i] = xf[i] + vf[i];
            }
            let projected = project_factor(&shifted)
                .expect("x + v cannot be degenerate for ||v|| < 1e-8");
            of.copy_from_slice(&projected);
        } else {
            let norm = nsq.sqrt();
            let c = norm.cos();
            let s_over = norm.sin() / norm;
            for i in 0..dim {
                of[i] = xf[i].mul_add(c, vf[i] * s_over);
            }
        }
    }
    out
}

pub(crate) fn log_map_k<S: Scalar>(m: &Manifold, x: &[S], y: &[S]) -> Result<AVec<S>> {
    let mut out = AVec::zeros(m.ambient_dim);
    for (off, dim) in m.factor_slices() {
        let xf = &x[off..off + dim];
        let yf = &y[off..off + dim];
        let t = S::dot(xf, yf);
        log_factor(xf, yf, t, &mut out[off..off + dim])?;
    }
    Ok(out)
}

/// Factor-level logarithm with the inner product already computed.
#[inline]
pub(crate) fn log_factor<S: Scalar>(xf: &[S], yf: &[S], t: S, out: &mut [S]) -> Result<()> {
    if t.primal() <= -1.0 + CUT_LOCUS_TOL {
        return Err(Error::CutLocus { inner: t.primal() });
    }
    let scale = sphere_log_scale(t);
    for i in 0..xf.len() {
        out[i] = scale * (yf[i] - t * xf[i]);
    }
    Ok(())
}

pub(crate) fn cost_k<S: Scalar>(m: &Manifold, x: &[S], y: &[S]) -> S {
    let mut acc = S::zero();
    for (off, dim) in m.factor_slices() {
        let t = S::dot(&x[off..off + dim], &y[off..off + dim]);
        acc = acc + sphere_cost(t);
    }
    acc
}

pub(crate) fn distance_k<S: Scalar>(m: &Manifold, x: &[S], y: &[S]) -> S {
    let two = S::from_f64(2.0);
    (cost_k(m, x, y) * two).sqrt()
}

pub(crate) fn project_factor<S: Scalar>(raw: &[S]) -> Result<AVec<S>, f64> {
    let nsq = S::dot(raw, raw);
    let norm_p = nsq.primal().sqrt();
    if norm_p < 1e-12 {
        return Err(norm_p);
    }
    let norm = nsq.sqrt();
    let mut out = AVec::zeros(raw.len());
    for i in 0..raw.len() {
        out[i] = raw[i] / norm;
    }
    Ok(out)
}

pub(crate) fn project_k<S: Scalar>(m: &Manifold, raw: &[S]) -> Result<AVec<S>> {
    let mut out = AVec::zeros(m.ambient_dim);
    for (fi, (off, dim)) in m.factor_slices().enumerate() {
        match project_factor(&raw[off..off + dim]) {
            Ok(p) => out[off..off + dim].copy_from_slice(&p),
            Err(norm) => return Err(Error::DegenerateInput { factor: fi, norm }),
        }
    }
    Ok(out)
}

/// Parallel transport of a tangent vector at `x` along the geodesic to `y`
/// (factor-wise). Returns `None` when some factor displacement is
/// antipodal, where transport is undefined.
///
/// Transport is an orientation-preserving isometry, so expressing a map's
/// differential in a transported frame keeps |det| identical to any other
/// orthonormal-frame choice while making sign(det) a meaningful
/// orientation-preservation indicator.
pub(crate) fn parallel_transport_k<S: Scalar>(
    m: &Manifold,
    x: &[S],
    y: &[S],
    v: &[S],
) -> Option<AVec<S>> {
    let mut out = AVec::zeros(m.ambient_dim());
    for (off, dim) in m.factor_slices() {
        let xf = &x[off..off + dim];
        let yf = &y[off..off + dim];
        let vf = &v[off..off + dim];
        let t = S::dot(xf, yf);
        if 1.0 + t.primal() < CUT_LOCUS_TOL {
            return None;
        }
        let xv = S::dot(xf, vf);
        let yv = S::dot(yf, vf);
        let f = (xv + yv) / (S::one() + t);
        for j in 0..dim {
            out[off + j] = vf[j] - f * (xf[j] + yf[j]);
        }
    }
    Some(out)
}

/// Deterministic orthonormal basis of the tangent space at `x`.
///
/// Per factor: repeatedly take the ambient axis least aligned with `x`
/// (ties to the lower index), Gram-Schmidt against `x` and the basis built
/// so far, and normalize. Product bases are factor bases zero-padded across
/// the other slices. Any deterministic orthonormal choice is valid for
/// log-determinants since orthonormal changes of basis have |det| = 1.
pub(crate) fn tangent_basis_k<S: Scalar>(m: &Manifold, x: &[S]) -> Vec<AVec<S>> {
    let mut basis: Vec<AVec<S>> = Vec::with_capacity(m.intrinsic_dim);
    for (off, dim) in m.factor_slices() {
        let xf = &x[off..off + dim];
        // Axis order: ascending |x_i|, ties to the lower index.
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| {
            xf[a].primal()
                .abs()
                .partial_cmp(&xf[b].primal().abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut local: Vec<AVec<S>> = Vec::with_capacity(dim - 1);
        for &axis in order.iter().take(dim - 1) {
            let mut v = AVec::<S>::zeros(dim);
            v[axis] = S::one();
            let t = xf[axis]; // e_axis . x
            for i in 0..dim {
                v[i] = v[i] - t * xf[i];
            }
            for b in &local {
                let p = S::dot(&v, b);
                for i in 0..dim {
                    v[i] = v[i] - p * b[i];
                }
            }
            let normed = project_factor(&v).expect("least-aligned axis cannot degenerate");
            local.push(normed);
        }
        for b in local {
            let mut full = AVec::<S>::zeros(m.ambient_dim);
            full[off..off + dim].copy_from_slice(&b);
            basis.push(full);
        }
    }
    basis
}

// ---------------------------------------------------------------------------
// Validated point and tangent types
// ---------------------------------------------------------------------------

/// A point on a manifold, stored as its ambient embedding. Serializes as a
/// bare coordinate array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ManifoldPoint<T: Real = f64> {
    coords: Vec<T>,
}

impl<T: Real> ManifoldPoint<T> {
    /// Wraps coordinates after checking the per-factor unit-norm invariant
    /// (each sphere factor slice must have norm 1 within 1e-9).
    pub fn new(manifold: &Manifold, coords: Vec<T>) -> Result<Self> {
        if coords.len() != manifold.ambient_dim() {
            return Err(Error::DimensionMismatch {
                expected: manifold.ambient_dim(),
                got: coords.len(),
            });
        }
        for (off, dim) in manifold.factor_slices() {
            let nsq: f64 = coords[off..off + dim].iter().map(|c| c.primal() * c.primal()).sum();
            if (nsq.sqrt() - 1.0).abs() > 1e-9 {
                return Err(Error::ManifoldMismatch(format!(
                    "factor slice at offset {off} has norm {}, expected 1",
                    nsq.sqrt()
                )));
            }
        }
        Ok(Self { coords })
    }

    pub(crate) fn from_avec(v: AVec<T>) -> Self {
        Self { coords: v.to_vec() }
    }

    pub fn coords(&self) -> &[T] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<T> {
        self.coords
    }
}

/// A tangent vector at `base`, in ambient representation. Its Riemannian
/// norm equals the Euclidean norm of the components.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector<T: Real = f64> {
    pub base: ManifoldPoint<T>,
    pub components: Vec<T>,
}

impl<T: Real> TangentVector<T> {
    pub fn new(manifold: &Manifold, base: ManifoldPoint<T>, components: Vec<T>) -> Result<Self> {
        if components.len() != manifold.ambient_dim() {
            return Err(Error::DimensionMismatch {
                expected: manifold.ambient_dim(),
                got: components.len(),
            });
        }
        let norm: f64 =
            components.iter().map(|c| c.primal() * c.primal()).sum::<f64>().sqrt();
        for (off, dim) in manifold.factor_slices() {
            let inner: f64 = (off..off + dim)
                .map(|i| base.coords[i].primal() * components[i].primal())
                .sum();
            if inner.abs() > 1e-10 * norm.max(1.0) {
                return Err(Error::ManifoldMismatch(format!(
                    "components not tangent at factor offset {off}: <x, v> = {inner}"
                )));
            }
        }
        Ok(Self { base, components })
    }

    pub fn norm(&self) -> T {
        Scalar::sqrt(T::dot(&self.components, &self.components))
    }

    pub fn zero(manifold: &Manifold, base: ManifoldPoint<T>) -> Self {
        Self { base, components: vec![<T as Scalar>::zero(); manifold.ambient_dim()] }
    }
}

impl Manifold {
    /// Exponential map. `v.base` must equal `x` (this is a precondition,
    /// not a runtime error). `exp_x(0) = x` exactly.
    pub fn exp_map<T: Real>(&self, x: &ManifoldPoint<T>, v: &TangentVector<T>) -> ManifoldPoint<T> {
        debug_assert_eq!(v.base.coords(), x.coords(), "tangent vector not based at x");
        ManifoldPoint::from_avec(exp_map_k(self, x.coords(), &v.components))
    }

    /// Logarithm map; errors with [`Error::CutLocus`] when `y` is antipodal
    /// to `x` on some sphere factor.
    pub fn log_map<T: Real>(
        &self,
        x: &ManifoldPoint<T>,
        y: &ManifoldPoint<T>,
    ) -> Result<TangentVector<T>> {
        let v = log_map_k(self, x.coords(), y.coords())?;
        Ok(TangentVector { base: x.clone(), components: v.to_vec() })
    }

    /// Intrinsic distance; product factors add in quadrature.
    pub fn distance<T: Real>(&self, x: &ManifoldPoint<T>, y: &ManifoldPoint<T>) -> T {
        distance_k(self, x.coords(), y.coords())
    }

    /// Transport cost `c(x, y) = d(x, y)^2 / 2`.
    pub fn cost<T: Real>(&self, x: &ManifoldPoint<T>, y: &ManifoldPoint<T>) -> T {
        cost_k(self, x.coords(), y.coords())
    }

    /// Deterministic orthonormal tangent basis at `x` (see [`tangent_basis_k`]).
    pub fn tangent_basis<T: Real>(&self, x: &ManifoldPoint<T>) -> Vec<TangentVector<T>> {
        tangent_basis_k(self, x.coords())
            .into_iter()
            .map(|b| TangentVector { base: x.clone(), components: b.to_vec() })
            .collect()
    }

    /// Projects ambient gradient components onto the tangent space at `x`
    /// (factor-wise removal of the radial part).
    pub fn tangent_project<T: Real>(&self, x: &ManifoldPoint<T>, ambient: &mut [T]) {
        for (off, dim) in self.factor_slices() {
            let xf = &x.coords()[off..off + dim];
            let inner = T::dot(xf, &ambient[off..off + dim]);
            for i in 0..dim {
                ambient[off + i] = ambient[off + i] - inner * xf[i];
            }
        }
    }

    /// Nearest manifold point to a raw ambient vector (per-factor
    /// normalization); errors with [`Error::DegenerateInput`] on a
    /// vanishing factor slice.
    pub fn project<T: Real>(&self, raw: &[T]) -> Result<ManifoldPoint<T>> {
        if raw.len() != self.ambient_dim() {
            return Err(Error::DimensionMismatch { expected: self.ambient_dim(), got: raw.len() });
        }
        Ok(ManifoldPoint::from_avec(project_k(self, raw)?))
    }

    /// Uniform samples from the normalized volume measure: per factor, a
    /// standard Gaussian ambient vector, normalized.
    pub fn sample_uniform<T: Real, R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        n: usize,
    ) -> Vec<ManifoldPoint<T>> {
        (0..n).map(|_| self.sample_uniform_one(rng)).collect()
    }

    pub fn sample_uniform_one<T: Real, R: Rng + ?Sized>(&self, rng: &mut R) -> ManifoldPoint<T> {
        let mut coords = vec![<T as Scalar>::zero(); self.ambient_dim()];
        for (off, dim) in self.factor_slices() {
            loop {
                let mut nsq = 0.0f64;
                for i in 0..dim {
                    let g: f64 = StandardNormal.sample(rng);
                    coords[off + i] = <T as Scalar>::from_f64(g);
                    nsq += g * g;
                }
                if nsq.sqrt() >= 1e-12 {
                    let inv = <T as Scalar>::from_f64(1.0 / nsq.sqrt());
                    for i in 0..dim {
                        coords[off + i] = coords[off + i] * inv;
                    }
                    break;
                }
            }
        }
        ManifoldPoint { coords }
    }
}
