//! Exponential-map flow blocks and their composition.
//!
//! A block transports a point by one McCann step,
//!
//! ```text
//! s(x) = exp_x( -grad phi(x) ),
//! ```
//!
//! where `phi` is a (block) c-concave potential; a flow is the composition
//! `s = s_T ∘ ... ∘ s_1`. Change of variables runs through the Jacobian in
//! orthonormal tangent bases: with `{e_b}` a basis at `x` and `{e'_a}` a
//! basis at `s(x)`, the matrix `J_ab = <e'_a, D s(e_b)>` has a
//! basis-independent |det|, and log-determinants add along the composition
//! when each term is evaluated at the running intermediate point.
//!
//! Directional derivatives `D s(e_b)` come from forward-mode lanes
//! ([`DualN`]); no finite differencing is involved on the evaluation path.

use crate::avec::AVec;
use crate::density::Density;
use crate::dual::DualN;
use crate::error::{Error, Result};
use crate::manifold::{exp_map_k, tangent_basis_k, Manifold, ManifoldDescriptor, ManifoldPoint};
use crate::potential::{block_value_grad, BlockPotential, BlockView};
use crate::scalar::Scalar;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Which map the flow parameterizes.
///
/// `Forward`: base to target; the sampling path. `Backward`: target to
/// base; the likelihood path used for density estimation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// A composition of exponential-map blocks over one manifold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub manifold: ManifoldDescriptor,
    pub blocks: Vec<BlockPotential>,
}

impl Flow {
    /// Validates the block structure and returns the compiled manifold.
    pub fn validate(&self) -> Result<Manifold> {
        let m = self.manifold.build()?;
        if self.blocks.is_empty() {
            return Err(Error::InvalidConfig("flow needs at least one block".into()));
        }
        for b in &self.blocks {
            b.validate(&m)?;
        }
        Ok(m)
    }

    pub(crate) fn views<S: Scalar>(&self, lift: &mut impl FnMut(f64) -> S) -> Vec<BlockView<S>> {
        self.blocks.iter().map(|b| b.view_with(lift)).collect()
    }

    /// Sequential block application, first block first.
    pub fn apply(&self, manifold: &Manifold, x: &ManifoldPoint) -> Result<ManifoldPoint> {
        let views = self.views(&mut f64::from_f64);
        let mut p = AVec::from_slice(x.coords());
        for v in &views {
            p = apply_block_k(manifold, v, &p)?;
        }
        Ok(ManifoldPoint::from_avec(p))
    }

    /// Transported point and accumulated `log |det J|` along the flow.
    pub fn push_logdet(&self, manifold: &Manifold, x: &ManifoldPoint) -> Result<(ManifoldPoint, f64)> {
        let views = self.views(&mut f64::from_f64);
        let (p, ld, _) = flow_push_logdet(manifold, &views, x.coords())?;
        Ok((ManifoldPoint::from_avec(p), ld))
    }

    /// `log |det J|` of the whole composition at `x`.
    pub fn logdet(&self, manifold: &Manifold, x: &ManifoldPoint) -> Result<f64> {
        Ok(self.push_logdet(manifold, x)?.1)
    }
}

/// One block step `exp_x(-grad phi(x))`.
pub fn apply_block(
    manifold: &Manifold,
    block: &BlockPotential,
    x: &ManifoldPoint,
) -> Result<ManifoldPoint> {
    let view = block.view_with(&mut f64::from_f64);
    Ok(ManifoldPoint::from_avec(apply_block_k(manifold, &view, &AVec::from_slice(x.coords()))?))
}

/// `log |det J|` of a single block at `x` in deterministic tangent bases.
pub fn block_jacobian_logdet(
    manifold: &Manifold,
    block: &BlockPotential,
    x: &ManifoldPoint,
) -> Result<f64> {
    let view = block.view_with(&mut f64::from_f64);
    let (_, ld, _) = flow_push_logdet(manifold, std::slice::from_ref(&view), x.coords())?;
    Ok(ld)
}

/// Points `eta(l) = exp_x(-l grad phi(x))` at `l = 0, 1/steps, ..., 1`:
/// the constant-speed transport geodesic of a single block. `eta(0) = x`
/// and `eta(1) = apply_block(x)` exactly.
pub fn transport_geodesic(
    manifold: &Manifold,
    block: &BlockPotential,
    x: &ManifoldPoint,
    steps: usize,
) -> Result<Vec<ManifoldPoint>> {
    if steps == 0 {
        return Err(Error::InvalidConfig("geodesic needs at least one step".into()));
    }
    let view = block.view_with(&mut f64::from_f64);
    let (_, g) = block_value_grad(manifold, &view, x.coords(), true)?;
    let mut out = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let l = k as f64 / steps as f64;
        let v = g.map(|c| c * -l);
        out.push(ManifoldPoint::from_avec(exp_map_k(
            manifold,
            x.coords(),
            &v,
        )));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

pub(crate) fn apply_block_k<S: Scalar>(
    m: &Manifold,
    view: &BlockView<S>,
    x: &AVec<S>,
) -> Result<AVec<S>> {
    let (_, g) = block_value_grad(m, view, x, true)?;
    let v = g.map(|c| -c);
    Ok(exp_map_k(m, x, &v))
}

/// Result of pushing a point through one block together with its
/// tangent-basis Jacobian determinant. `det = None` marks an exact
/// identity step (the gradient was structurally zero), where `J = I`.
pub(crate) struct BlockPush<S> {
    pub point: AVec<S>,
    pub det: Option<S>,
}

pub(crate) fn block_push_jacobian<S: Scalar, const N: usize>(
    m: &Manifold,
    dual_view: &BlockView<DualN<S, N>>,
    x: &AVec<S>,
    basis_in: &[AVec<S>],
) -> Result<BlockPush<S>> {
    debug_assert_eq!(m.intrinsic_dim(), N);
    let dim = m.ambient_dim();

    // seed one forward lane per input basis vector
    let mut xd = AVec::<DualN<S, N>>::zeros(dim);
    for j in 0..dim {
        let mut eps = [S::zero(); N];
        for (b, e) in basis_in.iter().enumerate() {
            eps[b] = e[j];
        }
        xd[j] = DualN { re: x[j], eps };
    }

    let (_, g) = block_value_grad(m, dual_view, &xd, true)?;
    if g.iter().all(|c| c.is_literal_zero()) {
        // the step is the identity map in a neighborhood: s(x) = x and
        // D s = id, so the log-determinant is exactly zero
        return Ok(BlockPush { point: *x, det: None });
    }

    let v = g.map(|c| -c);
    let yd = exp_map_k(m, &xd, &v);
    let point = yd.map(|c| c.re);
    // the output frame is the input frame parallel-transported along the
    // displacement: |det J| is frame-independent either way, but the
    // transported frame makes sign(det J) track orientation preservation;
    // at (measure-zero) antipodal displacements fall back to the
    // deterministic frame
    let basis_out: Vec<AVec<S>> = {
        let transported: Option<Vec<AVec<S>>> = basis_in
            .iter()
            .map(|e| crate::manifold::parallel_transport_k(m, x, &point, e))
            .collect();
        transported.unwrap_or_else(|| tangent_basis_k(m, &point))
    };

    // J_ab = <e'_a, D s(e_b)>
    let mut jac = [[S::zero(); N]; N];
    for b in 0..N {
        let w = yd.map(|c| c.eps[b]);
        for (a, ea) in basis_out.iter().enumerate() {
            jac[a][b] = S::dot(ea, &w);
        }
    }
    let det = det_n::<S, N>(&mut jac);
    Ok(BlockPush { point, det: Some(det) })
}

/// Determinant of a small `N x N` matrix; direct formulas up to 3, LU with
/// partial pivoting (by primal magnitude) above.
fn det_n<S: Scalar, const N: usize>(a: &mut [[S; N]; N]) -> S {
    match N {
        1 => a[0][0],
        2 => a[0][0] * a[1][1] - a[0][1] * a[1][0],
        3 => {
            a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
                - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
        }
        _ => {
            let mut det = S::one();
            let mut sign = 1.0;
            for k in 0..N {
                let mut piv = k;
                for r in k + 1..N {
                    if a[r][k].primal().abs() > a[piv][k].primal().abs() {
                        piv = r;
                    }
                }
                if piv != k {
                    a.swap(piv, k);
                    sign = -sign;
                }
                if a[k][k].primal() == 0.0 {
                    return S::zero();
                }
                det = det * a[k][k];
                for r in k + 1..N {
                    let f = a[r][k] / a[k][k];
                    for c in k + 1..N {
                        a[r][c] = a[r][c] - f * a[k][c];
                    }
                }
            }
            if sign < 0.0 {
                -det
            } else {
                det
            }
        }
    }
}

fn walk_strict<S: Scalar, const N: usize>(
    m: &Manifold,
    views: &[BlockView<S>],
    x0: &[S],
) -> Result<(AVec<S>, S, f64)> {
    let dual_views: Vec<BlockView<DualN<S, N>>> = views.iter().map(|v| v.to_dual()).collect();
    let mut x = AVec::from_slice(x0);
    let mut logdet = S::zero();
    let mut sign = 1.0;
    for dv in &dual_views {
        let basis = tangent_basis_k(m, &x);
        let push = block_push_jacobian::<S, N>(m, dv, &x, &basis)?;
        if let Some(det) = push.det {
            let dp = det.primal();
            if dp.abs() < 1e-300 {
                return Err(Error::SingularJacobian { det_abs: dp.abs() });
            }
            sign *= dp.signum();
            logdet = logdet + det.abs().ln();
        }
        x = push.point;
    }
    Ok((x, logdet, sign))
}

/// Transported point, accumulated `log |det J|`, and determinant sign
/// product for the whole flow. Errors on cut-locus hits and on numerically
/// singular block Jacobians.
pub(crate) fn flow_push_logdet<S: Scalar>(
    m: &Manifold,
    views: &[BlockView<S>],
    x0: &[S],
) -> Result<(AVec<S>, S, f64)> {
    match m.intrinsic_dim() {
        1 => walk_strict::<S, 1>(m, views, x0),
        2 => walk_strict::<S, 2>(m, views, x0),
        3 => walk_strict::<S, 3>(m, views, x0),
        4 => walk_strict::<S, 4>(m, views, x0),
        d => Err(Error::InvalidConfig(format!(
            "log-determinants are supported for intrinsic dimension <= 4, got {d}"
        ))),
    }
}

/// Like [`flow_push_logdet`] over `f64`, but treats singular block
/// Jacobians as data instead of errors: the log-determinant becomes
/// `-inf`, the degenerate-block count is reported, and the walk continues.
/// Used by sampling and the diffeomorphism audit, where hard-min flows
/// legitimately produce piecewise-constant (degenerate) transport.
pub(crate) struct LenientPush {
    pub point: AVec<f64>,
    pub logdet: f64,
    pub sign: f64,
    pub degenerate_blocks: usize,
    /// Smallest per-block |det| seen along the walk.
    pub min_abs_det: f64,
}

pub(crate) fn flow_push_lenient(
    m: &Manifold,
    views: &[BlockView<f64>],
    x0: &[f64],
) -> Result<LenientPush> {
    match m.intrinsic_dim() {
        1 => walk_lenient::<1>(m, views, x0),
        2 => walk_lenient::<2>(m, views, x0),
        3 => walk_lenient::<3>(m, views, x0),
        4 => walk_lenient::<4>(m, views, x0),
        d => Err(Error::InvalidConfig(format!(
            "log-determinants are supported for intrinsic dimension <= 4, got {d}"
        ))),
    }
}

fn walk_lenient<const N: usize>(
    m: &Manifold,
    views: &[BlockView<f64>],
    x0: &[f64],
) -> Result<LenientPush> {
    let dual_views: Vec<BlockView<DualN<f64, N>>> = views.iter().map(|v| v.to_dual()).collect();
    let mut out = LenientPush {
        point: AVec::from_slice(x0),
        logdet: 0.0,
        sign: 1.0,
        degenerate_blocks: 0,
        min_abs_det: f64::INFINITY,
    };
    for dv in &dual_views {
        let basis = tangent_basis_k(m, &out.point);
        let push = block_push_jacobian::<f64, N>(m, dv, &out.point, &basis)?;
        if let Some(det) = push.det {
            out.min_abs_det = out.min_abs_det.min(det.abs());
            if det.abs() < 1e-300 {
                out.logdet = f64::NEG_INFINITY;
                out.sign = 0.0;
                out.degenerate_blocks += 1;
            } else {
                out.sign *= det.signum();
                out.logdet += det.abs().ln();
            }
        }
        out.point = push.point;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Pushed densities
// ---------------------------------------------------------------------------

/// A base density pushed through a flow.
#[derive(Clone, Debug)]
pub struct PushedDensity {
    pub base: Density,
    pub flow: Flow,
    pub direction: Direction,
    manifold: Manifold,
}

/// Forward samples with their model log-densities, plus the number of
/// cut-locus rejections that occurred while drawing them.
pub struct SampleBatch {
    pub points: Vec<(ManifoldPoint, f64)>,
    pub rejected_cutlocus: usize,
}

impl PushedDensity {
    pub fn new(base: Density, flow: Flow, direction: Direction) -> Result<Self> {
        let manifold = flow.validate()?;
        if base.manifold() != &manifold {
            return Err(Error::ManifoldMismatch("base density manifold differs from flow".into()));
        }
        Ok(Self { base, flow, direction, manifold })
    }

    pub fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    /// Model log-density at `y` for likelihood-path (backward) flows:
    /// `log mu(s(y)) + log |det J_s(y)|`.
    pub fn log_density(&self, y: &ManifoldPoint) -> Result<f64> {
        if self.direction != Direction::Backward {
            return Err(Error::InvalidDirection(
                "pointwise log-density needs a backward-direction flow; forward flows are \
                 evaluated along their own samples"
                    .into(),
            ));
        }
        let (mapped, logdet) = self.flow.push_logdet(&self.manifold, y)?;
        Ok(self.base.log_density(&mapped) + logdet)
    }

    /// Draws `y = s(x), x ~ mu` with `log nu(y) = log mu(x) - log |det J|`.
    /// Cut-locus hits are rejected and redrawn (counted in the result).
    /// Degenerate transport (piecewise-constant hard-min blocks) reports
    /// very large log-densities rather than erroring; such maps concentrate
    /// mass on points.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<SampleBatch> {
        if self.direction != Direction::Forward {
            return Err(Error::InvalidDirection("sampling needs a forward-direction flow".into()));
        }
        let views = self.flow.views(&mut f64::from_f64);
        let mut points = Vec::with_capacity(n);
        let mut rejected = 0usize;
        let max_attempts = 100 + 10 * n;
        let mut attempts = 0usize;
        while points.len() < n {
            attempts += 1;
            if attempts > max_attempts {
                return Err(Error::InvalidBatch(format!(
                    "cut-locus rejection rate too high: {rejected} rejections for {n} samples"
                )));
            }
            let x = self.base.sample_one(rng);
            match flow_push_lenient(&self.manifold, &views, x.coords()) {
                Ok(push) => {
                    let log_density = self.base.log_density(&x) - push.logdet;
                    points.push((ManifoldPoint::from_avec(push.point), log_density));
                }
                Err(Error::CutLocus { .. }) => rejected += 1,
                Err(e) => return Err(e),
            }
        }
        Ok(SampleBatch { points, rejected_cutlocus: rejected })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::DensitySpec;
    use crate::potential::{DiscretePotential, PotentialComponent};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn s2() -> Manifold {
        ManifoldDescriptor::sphere(2).build().unwrap()
    }

    fn pt(m: &Manifold, coords: &[f64]) -> ManifoldPoint {
        ManifoldPoint::new(m, coords.to_vec()).unwrap()
    }

    fn random_block(m: &Manifold, n: usize, gamma: f64, rng: &mut ChaCha8Rng) -> BlockPotential {
        let components = m
            .sample_uniform::<f64, _>(rng, n)
            .into_iter()
            .map(|p| PotentialComponent { y: p.into_coords(), alpha: rng.random_range(-0.3..0.3) })
            .collect();
        BlockPotential {
            layers: vec![DiscretePotential { components, gamma }],
            weights_raw: vec![-3.0],
            identity_relu: None,
        }
    }

    fn identity_block(m: &Manifold, rng: &mut ChaCha8Rng) -> BlockPotential {
        let components = m
            .sample_uniform::<f64, _>(rng, 6)
            .into_iter()
            .map(|p| PotentialComponent { y: p.into_coords(), alpha: rng.random_range(0.1..0.6) })
            .collect();
        BlockPotential {
            layers: vec![DiscretePotential { components, gamma: 0.0 }],
            weights_raw: vec![0.0],
            identity_relu: Some(0.0),
        }
    }

    #[test]
    fn identity_block_fixes_points_bitwise() {
        let m = s2();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = identity_block(&m, &mut rng);
        for _ in 0..50 {
            let x: ManifoldPoint = m.sample_uniform_one(&mut rng);
            let y = apply_block(&m, &b, &x).unwrap();
            assert_eq!(x.coords(), y.coords());
            assert_eq!(block_jacobian_logdet(&m, &b, &x).unwrap(), 0.0);
        }
    }

    #[test]
    fn single_hard_component_transports_everything_to_it() {
        let m = s2();
        let target = [0.0, 0.0, 1.0];
        let b = BlockPotential {
            layers: vec![DiscretePotential {
                components: vec![PotentialComponent { y: target.to_vec(), alpha: 0.0 }],
                gamma: 0.0,
            }],
            weights_raw: vec![-50.0],
            identity_relu: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x: ManifoldPoint = m.sample_uniform_one(&mut rng);
            if x.coords()[2] < -0.99 {
                continue; // antipodal region
            }
            let y = apply_block(&m, &b, &x).unwrap();
            for (a, t) in y.coords().iter().zip(&target) {
                assert_relative_eq!(*a, *t, epsilon = 1e-9);
            }
            // sphere invariant after the step
            let norm: f64 = y.coords().iter().map(|c| c * c).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flow_composition_matches_sequential_blocks() {
        let m = s2();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b1 = random_block(&m, 8, 0.1, &mut rng);
        let b2 = random_block(&m, 5, 0.2, &mut rng);
        let flow = Flow {
            manifold: m.descriptor().clone(),
            blocks: vec![b1.clone(), b2.clone()],
        };
        let x: ManifoldPoint = m.sample_uniform_one(&mut rng);
        let composed = flow.apply(&m, &x).unwrap();
        let manual = apply_block(&m, &b2, &apply_block(&m, &b1, &x).unwrap()).unwrap();
        assert_eq!(composed.coords(), manual.coords());
    }

    #[test]
    fn identity_flow_has_zero_logdet() {
        let m = s2();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let flow = Flow {
            manifold: m.descriptor().clone(),
            blocks: vec![identity_block(&m, &mut rng), identity_block(&m, &mut rng)],
        };
        for _ in 0..20 {
            let x: ManifoldPoint = m.sample_uniform_one(&mut rng);
            let (y, ld) = flow.push_logdet(&m, &x).unwrap();
            assert_eq!(y.coords(), x.coords());
            assert_eq!(ld, 0.0);
        }
    }

    #[test]
    fn flow_logdet_is_sum_of_block_logdets_at_running_points() {
        let m = s2();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b1 = random_block(&m, 7, 0.1, &mut rng);
        let b2 = random_block(&m, 6, 0.3, &mut rng);
        let flow =
            Flow { manifold: m.descriptor().clone(), blocks: vec![b1.clone(), b2.clone()] };
        for _ in 0..10 {
            let x: ManifoldPoint = m.sample_uniform_one(&mut rng);
            let ld = flow.logdet(&m, &x).unwrap();
            let mid = apply_block(&m, &b1, &x).unwrap();
            let parts = block_jacobian_logdet(&m, &b1, &x).unwrap()
                + block_jacobian_logdet(&m, &b2, &mid).unwrap();
            assert_relative_eq!(ld, parts, epsilon = 1e-12);
        }
    }

    #[test]
    fn logdet_invariant_to_rotated_input_basis() {
        let m = s2();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = random_block(&m, 8, 0.1, &mut rng);
        let view = b.view_with(&mut f64::from_f64);
        let dual = view.to_dual::<2>();
        for _ in 0..10 {
            let x: ManifoldPoint = m.sample_uniform_one(&mut rng);
            let xa = AVec::from_slice(x.coords());
            let basis = tangent_basis_k(&m, &xa[..]);
            let push = block_push_jacobian::<f64, 2>(&m, &dual, &xa, &basis).unwrap();
            let ld = push.det.unwrap().abs().ln();

            let phi: f64 = rng.random_range(0.0..2.0 * PI);
            let (c, s) = (phi.cos(), phi.sin());
            let mut rot = vec![AVec::<f64>::zeros(3), AVec::<f64>::zeros(3)];
            for j in 0..3 {
                rot[0][j] = c * basis[0][j] + s * basis[1][j];
                rot[1][j] = -s * basis[0][j] + c * basis[1][j];
            }
            let push2 = block_push_jacobian::<f64, 2>(&m, &dual, &xa, &rot).unwrap();
            let ld2 = push2.det.unwrap().abs().ln();
            assert!((ld - ld2).abs() < 1e-10, "{ld} vs {ld2}");
        }
    }

    #[test]
    fn block_logdet_matches_finite_difference_jacobian() {
        let m = s2();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = random_block(&m, 10, 0.1, &mut rng);
        let h = 1e-5;
        for _ in 0..10 {
            let x: ManifoldPoint = m.sample_uniform_one(&mut rng);
            let ld = block_jacobian_logdet(&m, &b, &x).unwrap();

            // central differences with geodesic steps, projected into the
            // output basis
            let basis = m.tangent_basis(&x);
            let y = apply_block(&m, &b, &x).unwrap();
            let basis_out = m.tangent_basis(&y);
            let mut j = [[0.0f64; 2]; 2];
            for (bcol, eb) in basis.iter().enumerate() {
                let step = |sign: f64| {
                    let v = crate::manifold::TangentVector::new(
                        &m,
                        x.clone(),
                        eb.components.iter().map(|c| c * sign * h).collect(),
                    )
                    .unwrap();
                    apply_block(&m, &b, &m.exp_map(&x, &v)).unwrap()
                };
                let (plus, minus) = (step(1.0), step(-1.0));
                for (arow, ea) in basis_out.iter().enumerate() {
                    let d: f64 = plus
                        .coords()
                        .iter()
                        .zip(minus.coords())
                        .zip(&ea.components)
                        .map(|((p, q), e)| (p - q) / (2.0 * h) * e)
                        .sum();
                    j[arow][bcol] = d;
                }
            }
            let fd = (j[0][0] * j[1][1] - j[0][1] * j[1][0]).abs().ln();
            let denom = ld.abs().max(fd.abs()).max(1e-3);
            assert!((ld - fd).abs() / denom < 1e-4, "logdet {ld} vs fd {fd}");
        }
    }

    #[test]
    fn geodesic_endpoints_and_constant_speed() {
        let m = s2();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = random_block(&m, 8, 0.1, &mut rng);
        let x: ManifoldPoint = m.sample_uniform_one(&mut rng);
        let steps = 16;
        let path = transport_geodesic(&m, &b, &x, steps).unwrap();
        assert_eq!(path.len(), steps + 1);
        assert_eq!(path[0].coords(), x.coords());
        let end = apply_block(&m, &b, &x).unwrap();
        for (a, e) in path[steps].coords().iter().zip(end.coords()) {
            assert!((a - e).abs() < 1e-12);
        }
        let d0 = m.distance(&path[0], &path[1]);
        for k in 1..steps {
            let d = m.distance(&path[k], &path[k + 1]);
            assert!((d - d0).abs() < 1e-9, "step {k}: {d} vs {d0}");
        }
    }

    #[test]
    fn identity_block_geodesic_stays_put() {
        let m = s2();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = identity_block(&m, &mut rng);
        let x: ManifoldPoint = m.sample_uniform_one(&mut rng);
        for p in transport_geodesic(&m, &b, &x, 4).unwrap() {
            assert_eq!(p.coords(), x.coords());
        }
    }

    #[test]
    fn identity_pushed_density_matches_base() {
        let m = s2();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let flow =
            Flow { manifold: m.descriptor().clone(), blocks: vec![identity_block(&m, &mut rng)] };
        let base = Density::new(&m, DensitySpec::Uniform).unwrap();

        let pd = PushedDensity::new(base.clone(), flow.clone(), Direction::Backward).unwrap();
        let x: ManifoldPoint = m.sample_uniform_one(&mut rng);
        assert_eq!(pd.log_density(&x).unwrap(), -(4.0 * PI).ln());

        let pf = PushedDensity::new(base, flow, Direction::Forward).unwrap();
        let batch = pf.sample(&mut rng, 100).unwrap();
        assert_eq!(batch.points.len(), 100);
        assert_eq!(batch.rejected_cutlocus, 0);
        for (_, ld) in &batch.points {
            assert_eq!(*ld, -(4.0 * PI).ln());
        }
        assert!(pf.sample(&mut rng, 0).unwrap().points.is_empty());
    }

    #[test]
    fn hard_single_component_flow_samples_collapse() {
        let m = s2();
        let b = BlockPotential {
            layers: vec![DiscretePotential {
                components: vec![PotentialComponent { y: vec![0.0, 0.0, 1.0], alpha: 0.0 }],
                gamma: 0.0,
            }],
            weights_raw: vec![-50.0],
            identity_relu: None,
        };
        let flow = Flow { manifold: m.descriptor().clone(), blocks: vec![b] };
        let base = Density::uniform(&m);
        let pf = PushedDensity::new(base, flow, Direction::Forward).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let batch = pf.sample(&mut rng, 50).unwrap();
        for (p, ld) in &batch.points {
            assert!((p.coords()[2] - 1.0).abs() < 1e-9);
            // the Jacobian of piecewise-constant transport is numerically
            // degenerate; the reported density blows up accordingly
            assert!(*ld > 10.0, "degenerate transport concentrates mass, got {ld}");
        }
    }

    #[test]
    fn wrong_direction_operations_error() {
        let m = s2();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let flow =
            Flow { manifold: m.descriptor().clone(), blocks: vec![identity_block(&m, &mut rng)] };
        let base = Density::uniform(&m);
        let fwd = PushedDensity::new(base.clone(), flow.clone(), Direction::Forward).unwrap();
        let bwd = PushedDensity::new(base, flow, Direction::Backward).unwrap();
        let x: ManifoldPoint = m.sample_uniform_one(&mut rng);
        assert!(matches!(fwd.log_density(&x), Err(Error::InvalidDirection(_))));
        assert!(matches!(bwd.sample(&mut rng, 1), Err(Error::InvalidDirection(_))));
    }
}
