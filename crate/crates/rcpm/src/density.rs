//! Base and target densities: uniform measures, wrapped-Gaussian mixtures,
//! the 4-mode sphere benchmark, the sphere checkerboard, the 3-modal torus
//! target, and kernel density estimates over ingested point clouds.
//!
//! Every density here is both sampleable and pointwise evaluable. Densities
//! that lack a closed-form normalizer are normalized once by quadrature at
//! construction. Log-density evaluation is scalar-generic so the same code
//! feeds plain floats and gradient tapes.

use crate::error::{Error, Result};
use crate::grid::{chart_kind, point_to_chart, quadrature, ChartKind};
use crate::manifold::{Manifold, ManifoldPoint, TangentVector};
use crate::scalar::Scalar;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Serializable density description; resolved against a manifold by
/// [`Density::new`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensitySpec {
    Uniform,
    WrappedGaussianMixture {
        centers: Vec<Vec<f64>>,
        scales: Vec<f64>,
        weights: Vec<f64>,
    },
    /// Equal-weight mixture of four wrapped Gaussians with tetrahedral
    /// centers and scale 0.3 on `S^2` (reconstruction of the 4-mode
    /// benchmark target; the published target parameters are not public).
    SphereMixture4,
    /// 4x8 alternating-cell indicator checkerboard in the (theta, phi)
    /// chart, uniform within active cells.
    SphereCheckerboard,
    /// Three-mode torus density `p ∝ (1/3) Σᵢ exp[cos(θ₁−aᵢ¹)+cos(θ₂−aᵢ²)]`
    /// with `a₁=[4.18,6.7]`, `a₂=[4.18,4.7]`, `a₃=[4.18,2.7]`.
    Torus3Modal,
    /// Gaussian-kernel density estimate on intrinsic distance over a point
    /// cloud, normalized by quadrature.
    KdeFromPoints { points: Vec<Vec<f64>>, bandwidth: f64 },
}

const TORUS_MODES: [[f64; 2]; 3] = [[4.18, 6.7], [4.18, 4.7], [4.18, 2.7]];

/// Resolution of the normalizer quadrature, chosen per chart so that the
/// normalization error is far below the 1e-2 tolerances asserted on it.
fn norm_res(m: &Manifold) -> usize {
    match chart_kind(m) {
        Ok(ChartKind::Circle) => 4096,
        Ok(ChartKind::Sphere2) => 128,
        _ => 256,
    }
}

#[derive(Clone, Debug)]
enum Resolved {
    Uniform,
    Mixture {
        centers: Vec<ManifoldPoint>,
        scales: Vec<f64>,
        log_weights: Vec<f64>,
        log_norm: f64,
    },
    Checkerboard {
        log_active: f64,
    },
    Torus3Modal {
        log_norm: f64,
    },
    Kde {
        points: Vec<ManifoldPoint>,
        bandwidth: f64,
        log_norm: f64,
    },
}

/// A probability density on a manifold.
#[derive(Clone, Debug)]
pub struct Density {
    manifold: Manifold,
    spec: DensitySpec,
    resolved: Resolved,
}

impl Density {
    pub fn new(manifold: &Manifold, spec: DensitySpec) -> Result<Self> {
        let resolved = match &spec {
            DensitySpec::Uniform => Resolved::Uniform,
            DensitySpec::WrappedGaussianMixture { centers, scales, weights } => {
                resolve_mixture(manifold, centers, scales, weights)?
            }
            DensitySpec::SphereMixture4 => {
                if manifold.ambient_dim() != 3 || manifold.n_factors() != 1 {
                    return Err(Error::InvalidConfig("sphere_mixture4 requires S^2".into()));
                }
                let s = 1.0 / 3.0f64.sqrt();
                let centers = vec![
                    vec![s, s, s],
                    vec![s, -s, -s],
                    vec![-s, s, -s],
                    vec![-s, -s, s],
                ];
                resolve_mixture(manifold, &centers, &[0.3; 4], &[0.25; 4])?
            }
            DensitySpec::SphereCheckerboard => {
                if !matches!(chart_kind(manifold)?, ChartKind::Sphere2) {
                    return Err(Error::InvalidConfig("checkerboard requires S^2".into()));
                }
                // uniform on active cells; normalized by quadrature
                let grid = quadrature(manifold, 256)?;
                let mut active_area = 0.0;
                for (p, w) in grid.points.iter().zip(&grid.weights) {
                    if checkerboard_active(manifold, p)? {
                        active_area += w;
                    }
                }
                Resolved::Checkerboard { log_active: -(active_area.ln()) }
            }
            DensitySpec::Torus3Modal => {
                if !matches!(chart_kind(manifold)?, ChartKind::Circles(2)) {
                    return Err(Error::InvalidConfig("torus_3modal requires S^1 x S^1".into()));
                }
                let mut me = Self {
                    manifold: manifold.clone(),
                    spec: spec.clone(),
                    resolved: Resolved::Torus3Modal { log_norm: 0.0 },
                };
                let log_norm = me.quadrature_log_norm(norm_res(manifold))?;
                me.resolved = Resolved::Torus3Modal { log_norm };
                return Ok(me);
            }
            DensitySpec::KdeFromPoints { points, bandwidth } => {
                if points.is_empty() {
                    return Err(Error::InvalidBatch("kde needs at least one point".into()));
                }
                if !(*bandwidth > 0.0) {
                    return Err(Error::InvalidConfig("kde bandwidth must be positive".into()));
                }
                let pts: Result<Vec<_>> = points
                    .iter()
                    .map(|c| ManifoldPoint::new(manifold, c.clone()))
                    .collect();
                let mut me = Self {
                    manifold: manifold.clone(),
                    spec: spec.clone(),
                    resolved: Resolved::Kde { points: pts?, bandwidth: *bandwidth, log_norm: 0.0 },
                };
                let log_norm = me.quadrature_log_norm(norm_res(manifold))?;
                if let Resolved::Kde { log_norm: ln, .. } = &mut me.resolved {
                    *ln = log_norm;
                }
                return Ok(me);
            }
        };
        Ok(Self { manifold: manifold.clone(), spec, resolved })
    }

    pub fn uniform(manifold: &Manifold) -> Self {
        Self { manifold: manifold.clone(), spec: DensitySpec::Uniform, resolved: Resolved::Uniform }
    }

    pub fn kde(manifold: &Manifold, points: Vec<Vec<f64>>, bandwidth: f64) -> Result<Self> {
        Self::new(manifold, DensitySpec::KdeFromPoints { points, bandwidth })
    }

    pub fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    pub fn spec(&self) -> &DensitySpec {
        &self.spec
    }

    /// All built-in densities can be evaluated pointwise.
    pub fn has_log_density(&self) -> bool {
        true
    }

    /// All built-in densities can be sampled.
    pub fn sampleable(&self) -> bool {
        true
    }

    fn quadrature_log_norm(&self, res: usize) -> Result<f64> {
        let grid = quadrature(&self.manifold, res)?;
        let mut terms: Vec<f64> = Vec::with_capacity(grid.len());
        for (p, w) in grid.points.iter().zip(&grid.weights) {
            let lu = self.log_density_unnorm(p.coords());
            if lu > f64::NEG_INFINITY {
                terms.push(lu + w.ln());
            }
        }
        Ok(f64::log_sum_exp(&terms))
    }

    /// Log-density at `x` with respect to the Riemannian volume measure.
    /// Can be `-inf` where the density vanishes (checkerboard).
    pub fn log_density(&self, x: &ManifoldPoint) -> f64 {
        self.log_density_s(x.coords())
    }

    /// Scalar-generic log-density (tape- and dual-compatible).
    pub(crate) fn log_density_s<S: Scalar>(&self, x: &[S]) -> S {
        match &self.resolved {
            Resolved::Uniform => S::from_f64(self.manifold.uniform_log_density()),
            Resolved::Mixture { centers, scales, log_weights, log_norm } => {
                let mut terms = Vec::with_capacity(centers.len());
                for ((c, &s), &lw) in centers.iter().zip(scales).zip(log_weights) {
                    terms.push(
                        wrapped_gaussian_log_unnorm(&self.manifold, c.coords(), s, x)
                            + S::from_f64(lw),
                    );
                }
                S::log_sum_exp(&terms) - S::from_f64(*log_norm)
            }
            Resolved::Checkerboard { log_active } => {
                // piecewise constant: gradient zero almost everywhere
                let xf: Vec<f64> = x.iter().map(|c| c.primal()).collect();
                let p = ManifoldPoint::new(&self.manifold, xf)
                    .expect("checkerboard evaluation point must be on S^2");
                if checkerboard_active(&self.manifold, &p).expect("chart") {
                    S::from_f64(*log_active)
                } else {
                    S::from_f64(f64::NEG_INFINITY)
                }
            }
            Resolved::Torus3Modal { log_norm } => {
                torus3_log_unnorm(&self.manifold, x) - S::from_f64(*log_norm)
            }
            Resolved::Kde { points, bandwidth, log_norm } => {
                let inv = S::from_f64(-1.0 / (bandwidth * bandwidth));
                let terms: Vec<S> = points
                    .iter()
                    .map(|p| {
                        let pv: Vec<S> = p.coords().iter().map(|&c| S::from_f64(c)).collect();
                        crate::manifold::cost_k(&self.manifold, x, &pv) * inv
                    })
                    .collect();
                S::log_sum_exp(&terms)
                    - S::from_f64((points.len() as f64).ln() + *log_norm)
            }
        }
    }

    fn log_density_unnorm(&self, x: &[f64]) -> f64 {
        match &self.resolved {
            Resolved::Uniform => 0.0,
            Resolved::Mixture { centers, scales, log_weights, .. } => {
                let terms: Vec<f64> = centers
                    .iter()
                    .zip(scales)
                    .zip(log_weights)
                    .map(|((c, &s), &lw)| {
                        wrapped_gaussian_log_unnorm(&self.manifold, c.coords(), s, x) + lw
                    })
                    .collect();
                f64::log_sum_exp(&terms)
            }
            Resolved::Checkerboard { .. } => {
                let p = ManifoldPoint::new(&self.manifold, x.to_vec()).expect("point");
                if checkerboard_active(&self.manifold, &p).expect("chart") {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            Resolved::Torus3Modal { .. } => torus3_log_unnorm(&self.manifold, x),
            Resolved::Kde { points, bandwidth, .. } => {
                let inv = -1.0 / (bandwidth * bandwidth);
                let terms: Vec<f64> = points
                    .iter()
                    .map(|p| crate::manifold::cost_k(&self.manifold, x, p.coords()) * inv)
                    .collect();
                f64::log_sum_exp(&terms) - (points.len() as f64).ln()
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<ManifoldPoint> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> ManifoldPoint {
        match &self.resolved {
            Resolved::Uniform => self.manifold.sample_uniform_one(rng),
            Resolved::Mixture { centers, scales, log_weights, .. } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut k = centers.len() - 1;
                for (i, lw) in log_weights.iter().enumerate() {
                    acc += lw.exp();
                    if u <= acc {
                        k = i;
                        break;
                    }
                }
                sample_wrapped_gaussian(&self.manifold, rng, &centers[k], scales[k], 1)
                    .pop()
                    .expect("one sample")
            }
            Resolved::Checkerboard { .. } => loop {
                let p = self.manifold.sample_uniform_one(rng);
                if checkerboard_active(&self.manifold, &p).expect("chart") {
                    return p;
                }
            },
            Resolved::Torus3Modal { .. } => {
                let mode = TORUS_MODES[rng.random_range(0..3)];
                let t1 = sample_von_mises(rng, mode[0], 1.0);
                let t2 = sample_von_mises(rng, mode[1], 1.0);
                ManifoldPoint::new(&self.manifold, vec![t1.cos(), t1.sin(), t2.cos(), t2.sin()])
                    .expect("torus point")
            }
            Resolved::Kde { points, bandwidth, .. } => {
                let k = rng.random_range(0..points.len());
                sample_wrapped_gaussian(&self.manifold, rng, &points[k], *bandwidth, 1)
                    .pop()
                    .expect("one sample")
            }
        }
    }
}

fn resolve_mixture(
    manifold: &Manifold,
    centers: &[Vec<f64>],
    scales: &[f64],
    weights: &[f64],
) -> Result<Resolved> {
    if centers.is_empty() || centers.len() != scales.len() || centers.len() != weights.len() {
        return Err(Error::InvalidConfig("mixture centers/scales/weights must match".into()));
    }
    if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w <= 0.0) {
        return Err(Error::InvalidConfig("mixture weights must be a simplex".into()));
    }
    if scales.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidConfig("mixture scales must be positive".into()));
    }
    let centers: Result<Vec<_>> =
        centers.iter().map(|c| ManifoldPoint::new(manifold, c.clone())).collect();
    let centers = centers?;
    let log_weights: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    // normalize by quadrature: the single-branch wrapped Gaussian is only
    // approximately normalized on a compact manifold
    let mut d = Density {
        manifold: manifold.clone(),
        spec: DensitySpec::Uniform,
        resolved: Resolved::Mixture {
            centers: centers.clone(),
            scales: scales.to_vec(),
            log_weights: log_weights.clone(),
            log_norm: 0.0,
        },
    };
    let log_norm = d.quadrature_log_norm(norm_res(manifold))?;
    if let Resolved::Mixture { log_norm: ln, .. } = &mut d.resolved {
        *ln = log_norm;
    }
    Ok(d.resolved)
}

/// `ln(r / sin r)` as a function of `q = r^2`, series-stabilized near zero
/// and clamped just short of the antipode.
fn log_r_over_sin_r<S: Scalar>(q: S) -> S {
    let qp = q.primal();
    if qp < 1e-2 {
        // r^2/6 + r^4/180 + r^6/2835
        q * S::from_f64(1.0 / 6.0)
            + q * q * S::from_f64(1.0 / 180.0)
            + q * q * q * S::from_f64(1.0 / 2835.0)
    } else if qp >= (PI - 1e-6) * (PI - 1e-6) {
        // frozen at the clamp; the Gaussian factor has decayed to ~1e-21
        // by here so the value only needs to stay finite
        S::from_f64(PI.ln() - (1e-6f64).ln())
    } else {
        let r = q.sqrt();
        r.ln() - r.sin().ln()
    }
}

/// Unnormalized log-density at `x` of the push-forward of an isotropic
/// tangent Gaussian `N(0, scale^2 I)` at `center` through the exponential
/// map. Includes the volume correction `(sin r / r)^(d_f - 1)` per factor.
fn wrapped_gaussian_log_unnorm<S: Scalar>(
    manifold: &Manifold,
    center: &[f64],
    scale: f64,
    x: &[S],
) -> S {
    let d = manifold.intrinsic_dim() as f64;
    let mut ld = S::from_f64(-0.5 * d * (2.0 * PI * scale * scale).ln());
    let inv_two_s2 = S::from_f64(-1.0 / (2.0 * scale * scale));
    for (off, dim) in manifold.factor_slices() {
        let c: Vec<S> = center[off..off + dim].iter().map(|&v| S::from_f64(v)).collect();
        let t = S::dot(&x[off..off + dim], &c);
        let q = crate::manifold::sphere_cost(t) * S::from_f64(2.0); // r^2
        ld = ld + q * inv_two_s2;
        let df = (dim - 1) as f64;
        if df > 1.0 {
            ld = ld + log_r_over_sin_r(q) * S::from_f64(df - 1.0);
        }
    }
    ld
}

fn torus3_log_unnorm<S: Scalar>(manifold: &Manifold, x: &[S]) -> S {
    // cos(theta - a) = cos(theta) cos(a) + sin(theta) sin(a): linear in the
    // ambient coordinates of each circle factor
    let mut terms = Vec::with_capacity(3);
    for mode in &TORUS_MODES {
        let mut e = S::zero();
        for (f, (off, _)) in manifold.factor_slices().enumerate() {
            e = e + x[off] * S::from_f64(mode[f].cos()) + x[off + 1] * S::from_f64(mode[f].sin());
        }
        terms.push(e);
    }
    S::log_sum_exp(&terms) - S::from_f64(3.0f64.ln())
}

fn checkerboard_active(manifold: &Manifold, p: &ManifoldPoint) -> Result<bool> {
    let chart = point_to_chart(manifold, p)?;
    let i = ((chart[0] / PI) * 4.0).floor() as i64;
    let j = ((chart[1] / (2.0 * PI)) * 8.0).floor() as i64;
    Ok((i.clamp(0, 3) + j.clamp(0, 7)) % 2 == 0)
}

/// Samples the push-forward of `N(0, scale^2 I)` in the tangent space at
/// `center` through the exponential map.
pub fn sample_wrapped_gaussian<R: Rng + ?Sized>(
    manifold: &Manifold,
    rng: &mut R,
    center: &ManifoldPoint,
    scale: f64,
    n: usize,
) -> Vec<ManifoldPoint> {
    assert!(scale > 0.0, "wrapped Gaussian scale must be positive");
    let basis = manifold.tangent_basis(center);
    (0..n)
        .map(|_| {
            let mut v = vec![0.0f64; manifold.ambient_dim()];
            for b in &basis {
                let g: f64 = StandardNormal.sample(rng);
                for (vi, bi) in v.iter_mut().zip(&b.components) {
                    *vi += scale * g * bi;
                }
            }
            let tv = TangentVector { base: center.clone(), components: v };
            manifold.exp_map(center, &tv)
        })
        .collect()
}

/// Best-Fisher rejection sampler for the von Mises distribution.
fn sample_von_mises<R: Rng + ?Sized>(rng: &mut R, mu: f64, kappa: f64) -> f64 {
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.random();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        let u2: f64 = rng.random();
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let u3: f64 = rng.random();
            let sign = if u3 > 0.5 { 1.0 } else { -1.0 };
            let angle = mu + sign * f.clamp(-1.0, 1.0).acos();
            return angle.rem_euclid(2.0 * PI);
        }
    }
}
