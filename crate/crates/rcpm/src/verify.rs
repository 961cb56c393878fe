//! Independent verification oracles.
//!
//! Everything here is grid- or brute-force-based on purpose: these checks
//! audit the analytic gradient/Jacobian machinery, so they must not share
//! code paths with it. The oracles cover
//!
//! * the c-infimal convolution on grids and its involution property
//!   (`phi^cc = phi` for c-concave `phi`),
//! * the epsilon-net density construction
//!   `phi_eps(x) = min_i ( c(x, y_i) - phi^c(y_i) )` with its two-sided
//!   bound `0 <= phi_eps - phi <= 2 |M| eps`,
//! * pushforward histograms versus binned targets in total variation, and
//! * the diffeomorphism audit: signs and magnitudes of flow Jacobian
//!   determinants over uniform points.
//!
//! Grid c-transforms evaluated on the same node set they minimize over
//! keep the lower bound of the epsilon-net inequality exact: for a grid
//! node `x`, `phi^c(y) <= c(x,y) - phi(x)` holds by construction, hence
//! `phi_eps(x) >= phi(x)` up to float rounding.

use crate::density::Density;
use crate::error::{Error, Result};
use crate::flow::{flow_push_lenient, Direction, Flow, PushedDensity};
use crate::grid::{quadrature, ChartBins, ChartKind};
use crate::manifold::{Manifold, ManifoldPoint};
use crate::potential::DiscretePotential;
use crate::scalar::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::PI;

/// A function sampled on a chart grid.
pub struct GridFunction {
    manifold: Manifold,
    pub points: Vec<ManifoldPoint>,
    pub values: Vec<f64>,
}

impl GridFunction {
    /// Samples `f` on the canonical quadrature node set at resolution
    /// `res` (at least 16 nodes per dimension for meaningful bounds).
    pub fn sample(
        manifold: &Manifold,
        res: usize,
        mut f: impl FnMut(&ManifoldPoint) -> f64,
    ) -> Result<Self> {
        if res < 16 {
            return Err(Error::InvalidConfig("grid resolution must be >= 16".into()));
        }
        let grid = quadrature(manifold, res)?;
        let values = grid.points.iter().map(&mut f).collect();
        Ok(Self { manifold: manifold.clone(), points: grid.points, values })
    }

    pub fn from_potential(manifold: &Manifold, p: &DiscretePotential, res: usize) -> Result<Self> {
        p.validate(manifold)?;
        Self::sample(manifold, res, |x| p.eval(manifold, x))
    }

    /// `psi^c(y) = min over grid nodes x of ( c(x, y) - psi(x) )`.
    pub fn c_transform_at(&self, y: &ManifoldPoint) -> f64 {
        self.points
            .iter()
            .zip(&self.values)
            .map(|(x, v)| self.manifold.cost(x, y) - v)
            .fold(f64::INFINITY, f64::min)
    }

    /// The c-infimal convolution evaluated on the same grid. The pointwise
    /// discretization error is bounded by the grid spacing times the
    /// `|M|`-Lipschitz constants of the cost and of `psi`.
    pub fn c_transform(&self) -> GridFunction {
        let values: Vec<f64> =
            self.points.par_iter().map(|y| self.c_transform_at(y)).collect();
        GridFunction { manifold: self.manifold.clone(), points: self.points.clone(), values }
    }

    /// Discrete Lipschitz constant: max |f(a) - f(b)| / d(a, b) over
    /// consecutive grid nodes.
    pub fn lipschitz_estimate(&self) -> f64 {
        let mut best = 0.0f64;
        for i in 1..self.points.len() {
            let d = self.manifold.distance(&self.points[i - 1], &self.points[i]);
            if d > 1e-12 {
                best = best.max((self.values[i] - self.values[i - 1]).abs() / d);
            }
        }
        best
    }
}

/// Max over grid nodes of `phi^cc - phi` for a hard-min discrete
/// potential. Exactly nonnegative by the same-grid construction; shrinks
/// at first order in the grid spacing.
pub fn involution_check(
    potential: &DiscretePotential,
    manifold: &Manifold,
    grid_res: usize,
) -> Result<f64> {
    if potential.gamma != 0.0 {
        return Err(Error::InvalidConfig("involution check needs a hard-min potential".into()));
    }
    let phi = GridFunction::from_potential(manifold, potential, grid_res)?;
    let phi_cc = phi.c_transform().c_transform();
    let defect = phi
        .values
        .iter()
        .zip(&phi_cc.values)
        .map(|(a, b)| (b - a).abs())
        .fold(0.0, f64::max);
    Ok(defect)
}

/// One row of the epsilon-net approximation table.
#[derive(Clone, Debug, Serialize)]
pub struct EpsilonNetRow {
    pub m: usize,
    /// Covering radius of the net, measured by brute force over the test
    /// grid.
    pub epsilon: f64,
    /// `sup_x (phi_eps - phi)` over the test grid.
    pub sup_error: f64,
    /// `min_x (phi_eps - phi)`; nonnegative up to float rounding.
    pub min_error: f64,
    /// The constructive bound `2 |M| epsilon`.
    pub bound: f64,
}

/// Uniform net on the circle (`2 pi i / m`, nested across power-scaled
/// sizes) or a Fibonacci lattice on the 2-sphere.
pub fn build_net(manifold: &Manifold, m: usize) -> Result<Vec<ManifoldPoint>> {
    match crate::grid::chart_kind(manifold)? {
        ChartKind::Circle => (0..m)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / m as f64;
                ManifoldPoint::new(manifold, vec![t.cos(), t.sin()])
            })
            .collect(),
        ChartKind::Sphere2 => {
            let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
            (0..m)
                .map(|i| {
                    let z = 1.0 - (2.0 * i as f64 + 1.0) / m as f64;
                    let r = (1.0 - z * z).max(0.0).sqrt();
                    let phi = 2.0 * PI * (i as f64 / golden).fract();
                    ManifoldPoint::new(manifold, vec![r * phi.cos(), r * phi.sin(), z])
                })
                .collect()
        }
        ChartKind::Circles(_) => {
            Err(Error::InvalidConfig("nets are built on S^1 or S^2".into()))
        }
    }
}

/// Covering radius of a net, brute-forced over a probe set. `probe_slack`
/// must bound the distance from any manifold point to its nearest probe;
/// adding it makes the result a rigorous upper bound on the true radius.
pub fn covering_radius(
    manifold: &Manifold,
    net: &[ManifoldPoint],
    probes: &[ManifoldPoint],
    probe_slack: f64,
) -> f64 {
    probes
        .par_iter()
        .map(|x| {
            net.iter()
                .map(|y| manifold.distance(x, y))
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(|| 0.0, f64::max)
        + probe_slack
}

/// Builds `phi_eps` from each net against a known hard discrete c-concave
/// target and tabulates the sup-error against the constructive bound.
pub fn epsilon_net_approximation(
    target: &DiscretePotential,
    manifold: &Manifold,
    net_sizes: &[usize],
    test_res: usize,
) -> Result<Vec<EpsilonNetRow>> {
    if target.gamma != 0.0 {
        return Err(Error::InvalidConfig("the epsilon-net target must be hard-min".into()));
    }
    let phi = GridFunction::from_potential(manifold, target, test_res)?;
    let diameter = manifold.diameter();
    // any point is at most this far from the nearest grid node
    let probe_slack = PI / test_res as f64;

    let mut rows = Vec::with_capacity(net_sizes.len());
    for &m in net_sizes {
        let net = build_net(manifold, m)?;
        let epsilon = covering_radius(manifold, &net, &phi.points, probe_slack);
        // phi^c at the net points, minimized over the same test grid that
        // the sup runs over (keeps phi_eps >= phi exact)
        let phi_c: Vec<f64> = net.par_iter().map(|y| phi.c_transform_at(y)).collect();
        let (mut sup_err, mut min_err) = (f64::NEG_INFINITY, f64::INFINITY);
        let errs: Vec<f64> = phi
            .points
            .par_iter()
            .zip(&phi.values)
            .map(|(x, &v)| {
                let phi_eps = net
                    .iter()
                    .zip(&phi_c)
                    .map(|(y, &pc)| manifold.cost(x, y) - pc)
                    .fold(f64::INFINITY, f64::min);
                phi_eps - v
            })
            .collect();
        for e in errs {
            sup_err = sup_err.max(e);
            min_err = min_err.min(e);
        }
        rows.push(EpsilonNetRow {
            m,
            epsilon,
            sup_error: sup_err,
            min_error: min_err,
            bound: 2.0 * diameter * epsilon,
        });
    }
    Ok(rows)
}

/// Gradient-convergence clause of the net construction, checked
/// qualitatively: at random points that are strictly inside a piece of
/// both functions (margin-gapped argmins, cut locus excluded), compare the
/// hard gradients `-log_x(argmin)` of `phi_eps` and of the target. No
/// rate is asserted, only decrease.
#[derive(Clone, Debug, Serialize)]
pub struct EpsilonNetGradRow {
    pub m: usize,
    pub max_grad_err: f64,
    pub skipped_fraction: f64,
}

pub fn epsilon_net_gradient_check(
    target: &DiscretePotential,
    manifold: &Manifold,
    net_sizes: &[usize],
    n_points: usize,
    margin: f64,
    seed: u64,
) -> Result<Vec<EpsilonNetGradRow>> {
    if target.gamma != 0.0 {
        return Err(Error::InvalidConfig("the epsilon-net target must be hard-min".into()));
    }
    let dense_res = 4096.min(512.max(net_sizes.iter().copied().max().unwrap_or(512) * 4));
    let phi = GridFunction::from_potential(manifold, target, dense_res)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<ManifoldPoint> = manifold.sample_uniform(&mut rng, n_points);

    // target argmins with margins
    let target_pieces: Vec<Option<(ManifoldPoint, f64)>> = points
        .iter()
        .map(|x| {
            let mut best = f64::INFINITY;
            let mut second = f64::INFINITY;
            let mut arg = 0usize;
            for (i, c) in target.components.iter().enumerate() {
                let yp = ManifoldPoint::new(manifold, c.y.clone()).expect("component");
                let v = manifold.cost(x, &yp) + c.alpha;
                if v < best {
                    second = best;
                    best = v;
                    arg = i;
                } else if v < second {
                    second = v;
                }
            }
            if second - best < margin {
                None
            } else {
                let yp = ManifoldPoint::new(manifold, target.components[arg].y.clone()).unwrap();
                Some((yp, best))
            }
        })
        .collect();

    let mut rows = Vec::with_capacity(net_sizes.len());
    for &m in net_sizes {
        let net = build_net(manifold, m)?;
        let phi_c: Vec<f64> = net.par_iter().map(|y| phi.c_transform_at(y)).collect();
        let mut max_err = 0.0f64;
        let mut skipped = 0usize;
        for (x, piece) in points.iter().zip(&target_pieces) {
            let Some((target_y, _)) = piece else {
                skipped += 1;
                continue;
            };
            let mut best = f64::INFINITY;
            let mut arg = 0usize;
            for (i, (y, &pc)) in net.iter().zip(&phi_c).enumerate() {
                let v = manifold.cost(x, y) - pc;
                if v < best {
                    best = v;
                    arg = i;
                }
            }
            let g_target = match manifold.log_map(x, target_y) {
                Ok(v) => v,
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            };
            let g_net = match manifold.log_map(x, &net[arg]) {
                Ok(v) => v,
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            };
            let err: f64 = g_target
                .components
                .iter()
                .zip(&g_net.components)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            max_err = max_err.max(err);
        }
        rows.push(EpsilonNetGradRow {
            m,
            max_grad_err: max_err,
            skipped_fraction: skipped as f64 / n_points as f64,
        });
    }
    Ok(rows)
}

/// Total-variation comparison of a forward flow's pushforward histogram
/// against binned target probabilities, with the multinomial noise floor
/// for the identity-baseline case.
#[derive(Clone, Debug, Serialize)]
pub struct PushforwardReport {
    pub tv: f64,
    pub n_samples: usize,
    pub shape: Vec<usize>,
    pub rejected_cutlocus: usize,
    /// Expected TV of a perfect model from multinomial sampling noise.
    pub noise_floor_mean: f64,
    /// Mean plus three standard deviations of the noise TV.
    pub noise_floor_3sigma: f64,
}

pub fn pushforward_check(
    flow: &Flow,
    base: &Density,
    target_bins: &ChartBins,
    n_samples: usize,
    seed: u64,
) -> Result<PushforwardReport> {
    let manifold = flow.validate()?;
    let pd = PushedDensity::new(base.clone(), flow.clone(), Direction::Forward)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = pd.sample(&mut rng, n_samples)?;
    let points: Vec<ManifoldPoint> = batch.points.into_iter().map(|(p, _)| p).collect();
    let emp = ChartBins::from_samples(&manifold, &target_bins.shape, &points)?;
    let tv = emp.total_variation(target_bins);

    // noise model: counts ~ Multinomial(n, q); E|p_hat - q| per bin from
    // the normal approximation
    let n = n_samples as f64;
    let mut mean = 0.0;
    let mut var = 0.0;
    for &q in &target_bins.probs {
        let s2 = q * (1.0 - q) / n;
        mean += 0.5 * (2.0 * s2 / PI).sqrt();
        var += 0.25 * s2 * (1.0 - 2.0 / PI);
    }
    Ok(PushforwardReport {
        tv,
        n_samples,
        shape: target_bins.shape.clone(),
        rejected_cutlocus: batch.rejected_cutlocus,
        noise_floor_mean: mean,
        noise_floor_3sigma: mean + 3.0 * var.sqrt(),
    })
}

/// Diffeomorphism audit: per-point sign and magnitude of the flow's
/// Jacobian determinant over uniform samples.
#[derive(Clone, Debug, Serialize)]
pub struct LogdetAuditReport {
    pub n: usize,
    pub min_logdet: f64,
    pub max_logdet: f64,
    /// No non-positive and no numerically degenerate determinants.
    pub all_positive: bool,
    pub n_nonpositive: usize,
    /// Points where some block determinant fell below 1e-12 in magnitude
    /// (piecewise-constant transport of hard-min flows shows up here).
    pub n_degenerate: usize,
    pub n_cutlocus: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_nonpositive: Option<Vec<f64>>,
}

pub fn logdet_positivity_audit(flow: &Flow, n: usize, seed: u64) -> Result<LogdetAuditReport> {
    let manifold = flow.validate()?;
    let views = flow.views(&mut f64::from_f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<ManifoldPoint> = manifold.sample_uniform(&mut rng, n);

    let results: Vec<Result<(f64, f64, f64)>> = points
        .par_chunks(1024)
        .flat_map_iter(|chunk| {
            chunk.iter().map(|x| {
                match flow_push_lenient(&manifold, &views, x.coords()) {
                    Ok(push) => Ok((push.logdet, push.sign, push.min_abs_det)),
                    Err(Error::CutLocus { .. }) => Ok((f64::NAN, 0.0, 0.0)),
                    Err(e) => Err(e),
                }
            })
        })
        .collect();

    let mut report = LogdetAuditReport {
        n,
        min_logdet: f64::INFINITY,
        max_logdet: f64::NEG_INFINITY,
        all_positive: true,
        n_nonpositive: 0,
        n_degenerate: 0,
        n_cutlocus: 0,
        first_nonpositive: None,
    };
    for (x, r) in points.iter().zip(results) {
        let (logdet, sign, min_abs_det) = r?;
        if logdet.is_nan() {
            report.n_cutlocus += 1;
            continue;
        }
        let degenerate = min_abs_det < 1e-12;
        if degenerate {
            report.n_degenerate += 1;
        }
        if logdet.is_finite() {
            report.min_logdet = report.min_logdet.min(logdet);
            report.max_logdet = report.max_logdet.max(logdet);
        }
        if sign <= 0.0 || degenerate {
            report.n_nonpositive += usize::from(sign <= 0.0);
            report.all_positive = false;
            if report.first_nonpositive.is_none() {
                report.first_nonpositive = Some(x.coords().to_vec());
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Finite-difference Jacobian oracles (independent of the forward-mode path)
// ---------------------------------------------------------------------------

/// Central-difference `log |det J|` of an arbitrary map at `x`, with
/// geodesic steps along the tangent basis at `x` and projections onto the
/// tangent basis at the image point.
pub fn fd_logdet_of(
    manifold: &Manifold,
    map: impl Fn(&ManifoldPoint) -> Result<ManifoldPoint>,
    x: &ManifoldPoint,
    h: f64,
) -> Result<f64> {
    let d = manifold.intrinsic_dim();
    let basis_in = manifold.tangent_basis(x);
    let y = map(x)?;
    let basis_out = manifold.tangent_basis(&y);
    let mut jac = vec![0.0; d * d];
    for (b, eb) in basis_in.iter().enumerate() {
        let step = |sign: f64| -> Result<ManifoldPoint> {
            let v = crate::manifold::TangentVector::new(
                manifold,
                x.clone(),
                eb.components.iter().map(|c| c * sign * h).collect(),
            )
            .expect("scaled basis vector stays tangent");
            map(&manifold.exp_map(x, &v))
        };
        let plus = step(1.0)?;
        let minus = step(-1.0)?;
        for (a, ea) in basis_out.iter().enumerate() {
            jac[a * d + b] = plus
                .coords()
                .iter()
                .zip(minus.coords())
                .zip(&ea.components)
                .map(|((p, q), e)| (p - q) / (2.0 * h) * e)
                .sum();
        }
    }
    let det = dense_det(&mut jac, d);
    if det.abs() < 1e-300 {
        return Err(Error::SingularJacobian { det_abs: det.abs() });
    }
    Ok(det.abs().ln())
}

/// FD oracle for a single block.
pub fn fd_block_jacobian_logdet(
    manifold: &Manifold,
    block: &crate::potential::BlockPotential,
    x: &ManifoldPoint,
    h: f64,
) -> Result<f64> {
    fd_logdet_of(manifold, |p| crate::flow::apply_block(manifold, block, p), x, h)
}

/// FD oracle for the composed flow map.
pub fn fd_flow_logdet(manifold: &Manifold, flow: &Flow, x: &ManifoldPoint, h: f64) -> Result<f64> {
    fd_logdet_of(manifold, |p| flow.apply(manifold, p), x, h)
}

fn dense_det(a: &mut [f64], n: usize) -> f64 {
    let mut det = 1.0;
    for k in 0..n {
        let mut piv = k;
        for r in k + 1..n {
            if a[r * n + k].abs() > a[piv * n + k].abs() {
                piv = r;
            }
        }
        if piv != k {
            for c in 0..n {
                a.swap(piv * n + c, k * n + c);
            }
            det = -det;
        }
        let p = a[k * n + k];
        if p == 0.0 {
            return 0.0;
        }
        det *= p;
        for r in k + 1..n {
            let f = a[r * n + k] / p;
            for c in k + 1..n {
                a[r * n + c] -= f * a[k * n + c];
            }
        }
    }
    det
}
