//! Discrete c-concave potentials and their smoothed variants.
//!
//! A discrete c-concave function is the minimum of finitely many shifted
//! cost pieces,
//!
//! ```text
//! phi(x) = min_i ( c(x, y_i) + alpha_i ),
//! ```
//!
//! which is c-concave by construction. Its Riemannian gradient at a point
//! where piece `i*` is strictly active is `-log_x(y_{i*})`. Replacing the
//! minimum by a soft-min of temperature `gamma` makes the gradient a softmax
//! combination of the per-piece gradients and lets the offsets receive
//! gradient signal during training.
//!
//! Block potentials combine `K` discrete potentials by the recursion
//!
//! ```text
//! psi_0 = 0,   psi_k = (1 - w_{k-1}) phi_{k-1} + w_{k-1} sigma(psi_{k-1}),
//! ```
//!
//! with `sigma(s) = min{0, s}` (the concave analog of ReLU) and mixing
//! weights `w_k` in `[0, 1]`, optionally followed by an outer concave ReLU
//! whose temperature `gamma2` controls identity initialization.

use crate::avec::AVec;
use crate::error::{Error, Result};
use crate::manifold::{log_factor, sphere_cost, Manifold, ManifoldPoint, TangentVector};
use crate::scalar::{Real, Scalar};
use serde::{Deserialize, Serialize};

/// One piece of a discrete potential: a location on the manifold and an
/// offset. Serializes as `{"y":[...ambient coords...],"alpha":r}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialComponent {
    pub y: Vec<f64>,
    pub alpha: f64,
}

/// A discrete c-concave potential: components plus the soft-min temperature
/// `gamma` (`gamma = 0` is the exact min).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretePotential {
    pub components: Vec<PotentialComponent>,
    pub gamma: f64,
}

impl DiscretePotential {
    pub fn validate(&self, manifold: &Manifold) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::InvalidConfig("potential needs at least one component".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidConfig(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        for c in &self.components {
            ManifoldPoint::new(manifold, c.y.clone())?;
            if !c.alpha.is_finite() {
                return Err(Error::InvalidConfig("component offset is not finite".into()));
            }
        }
        Ok(())
    }

    pub(crate) fn view_with<S: Scalar>(&self, lift: &mut impl FnMut(f64) -> S) -> PotentialView<S> {
        let dim = self.components[0].y.len();
        let mut ys = Vec::with_capacity(self.components.len() * dim);
        let mut alphas = Vec::with_capacity(self.components.len());
        for c in &self.components {
            for &v in &c.y {
                ys.push(lift(v));
            }
            alphas.push(lift(c.alpha));
        }
        PotentialView { ys, alphas, gamma: self.gamma, dim }
    }

    /// Potential value at `x`.
    pub fn eval<T: Real>(&self, manifold: &Manifold, x: &ManifoldPoint<T>) -> T {
        let view = self.view_with(&mut |v| <T as Scalar>::from_f64(v));
        let (value, _) = potential_value_grad(manifold, &view, x.coords(), false)
            .expect("evaluation never hits the cut locus");
        value
    }

    /// Riemannian gradient at `x`.
    pub fn grad<T: Real>(&self, manifold: &Manifold, x: &ManifoldPoint<T>) -> Result<TangentVector<T>> {
        let view = self.view_with(&mut |v| <T as Scalar>::from_f64(v));
        let (_, g) = potential_value_grad(manifold, &view, x.coords(), true)?;
        Ok(TangentVector { base: x.clone(), components: g.to_vec() })
    }
}

/// A block potential: `K` discrete layers combined by convex mixing and the
/// concave ReLU, with an optional outer identity-initialization ReLU.
///
/// Mixing weights are stored as unconstrained scalars and squashed through a
/// logistic map, so gradient steps cannot leave `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockPotential {
    pub layers: Vec<DiscretePotential>,
    pub weights_raw: Vec<f64>,
    /// `None`: no outer ReLU. `Some(g2)`: outer concave ReLU with soft-min
    /// temperature `g2` (`0` = hard).
    pub identity_relu: Option<f64>,
}

impl BlockPotential {
    pub fn validate(&self, manifold: &Manifold) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("block needs at least one layer".into()));
        }
        if self.layers.len() != self.weights_raw.len() {
            return Err(Error::InvalidConfig(format!(
                "{} layers but {} mixing weights",
                self.layers.len(),
                self.weights_raw.len()
            )));
        }
        if let Some(g2) = self.identity_relu {
            if !(g2 >= 0.0) {
                return Err(Error::InvalidConfig(format!("gamma2 must be >= 0, got {g2}")));
            }
        }
        for l in &self.layers {
            l.validate(manifold)?;
        }
        Ok(())
    }

    /// Squashed mixing weights `w_k` in `(0, 1)`.
    pub fn mix_weights(&self) -> Vec<f64> {
        self.weights_raw.iter().map(|&t| logistic(t)).collect()
    }

    pub(crate) fn view_with<S: Scalar>(&self, lift: &mut impl FnMut(f64) -> S) -> BlockView<S> {
        BlockView {
            layers: self.layers.iter().map(|l| l.view_with(lift)).collect(),
            weights_raw: self.weights_raw.iter().map(|&w| lift(w)).collect(),
            identity_relu: self.identity_relu,
        }
    }

    pub fn eval<T: Real>(&self, manifold: &Manifold, x: &ManifoldPoint<T>) -> T {
        let view = self.view_with(&mut |v| <T as Scalar>::from_f64(v));
        let (value, _) = block_value_grad(manifold, &view, x.coords(), false)
            .expect("evaluation never hits the cut locus");
        value
    }

    pub fn grad<T: Real>(&self, manifold: &Manifold, x: &ManifoldPoint<T>) -> Result<TangentVector<T>> {
        let view = self.view_with(&mut |v| <T as Scalar>::from_f64(v));
        let (_, g) = block_value_grad(manifold, &view, x.coords(), true)?;
        Ok(TangentVector { base: x.clone(), components: g.to_vec() })
    }
}

pub(crate) fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn logit(w: f64) -> f64 {
    (w / (1.0 - w)).ln()
}

// Wire format: `weights` carries the squashed values for consumers;
// `weights_raw` is the unconstrained source of truth for reloading.
#[derive(Serialize, Deserialize)]
struct BlockPotentialWire {
    layers: Vec<DiscretePotential>,
    weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights_raw: Option<Vec<f64>>,
    identity_relu: Option<f64>,
}

impl Serialize for BlockPotential {
    fn serialize<Ser: serde::Serializer>(&self, s: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        BlockPotentialWire {
            layers: self.layers.clone(),
            weights: self.mix_weights(),
            weights_raw: Some(self.weights_raw.clone()),
            identity_relu: self.identity_relu,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for BlockPotential {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let wire = BlockPotentialWire::deserialize(d)?;
        let weights_raw = match wire.weights_raw {
            Some(raw) => raw,
            None => wire.weights.iter().map(|&w| logit(w)).collect(),
        };
        Ok(BlockPotential { layers: wire.layers, weights_raw, identity_relu: wire.identity_relu })
    }
}

// ---------------------------------------------------------------------------
// Scalar-generic views and kernels
// ---------------------------------------------------------------------------

pub(crate) struct PotentialView<S> {
    /// Component locations, flattened `m x D` row-major.
    pub ys: Vec<S>,
    pub alphas: Vec<S>,
    pub gamma: f64,
    pub dim: usize,
}

pub(crate) struct BlockView<S> {
    pub layers: Vec<PotentialView<S>>,
    pub weights_raw: Vec<S>,
    pub identity_relu: Option<f64>,
}

impl<S: Scalar> PotentialView<S> {
    pub fn m(&self) -> usize {
        self.alphas.len()
    }

    pub fn to_dual<const N: usize>(&self) -> PotentialView<crate::dual::DualN<S, N>> {
        PotentialView {
            ys: self.ys.iter().map(|&s| crate::dual::DualN::constant(s)).collect(),
            alphas: self.alphas.iter().map(|&s| crate::dual::DualN::constant(s)).collect(),
            gamma: self.gamma,
            dim: self.dim,
        }
    }
}

impl<S: Scalar> BlockView<S> {
    pub fn to_dual<const N: usize>(&self) -> BlockView<crate::dual::DualN<S, N>> {
        BlockView {
            layers: self.layers.iter().map(|l| l.to_dual()).collect(),
            weights_raw: self
                .weights_raw
                .iter()
                .map(|&s| crate::dual::DualN::constant(s))
                .collect(),
            identity_relu: self.identity_relu,
        }
    }
}

/// Soft minimum `min_gamma(a_1..a_n) = -gamma log sum_i exp(-a_i / gamma)`,
/// computed with log-sum-exp shift stabilization. `gamma = 0` returns the
/// exact minimum (ties broken toward the lowest index).
pub fn soft_min<S: Scalar>(values: &[S], gamma: f64) -> S {
    assert!(!values.is_empty(), "soft_min of an empty slice");
    assert!(gamma >= 0.0, "soft_min temperature must be nonnegative");
    if gamma == 0.0 {
        let mut best = 0;
        for (i, v) in values.iter().enumerate() {
            if v.primal() < values[best].primal() {
                best = i;
            }
        }
        return values[best];
    }
    let neg_inv = S::from_f64(-1.0 / gamma);
    let scaled: Vec<S> = values.iter().map(|&v| v * neg_inv).collect();
    S::log_sum_exp(&scaled) * S::from_f64(-gamma)
}

/// Concave analog of ReLU, `sigma(s) = min{0, s}`, softened through
/// `soft_min([0, s], gamma2)` when `gamma2 > 0`.
pub fn concave_relu<S: Scalar>(s: S, gamma2: f64) -> S {
    concave_relu_value_deriv(s, gamma2).0
}

/// `(sigma(s), sigma'(s))`. The hard version takes derivative 0 at `s = 0`
/// by the same convention as the arccos clamp.
pub(crate) fn concave_relu_value_deriv<S: Scalar>(s: S, gamma2: f64) -> (S, S) {
    assert!(gamma2 >= 0.0, "concave_relu temperature must be nonnegative");
    if gamma2 == 0.0 {
        return if s.primal() < 0.0 { (s, S::one()) } else { (S::zero(), S::zero()) };
    }
    let g2 = S::from_f64(gamma2);
    if s.primal() > 0.0 {
        // -g2 ln(1 + exp(-s/g2))
        let e = (-s / g2).exp();
        let one_plus = S::one() + e;
        (-(g2 * one_plus.ln()), e / one_plus)
    } else {
        // s - g2 ln(1 + exp(s/g2))
        let e = (s / g2).exp();
        let one_plus = S::one() + e;
        (s - g2 * one_plus.ln(), S::one() / one_plus)
    }
}

fn logistic_s<S: Scalar>(t: S) -> S {
    if t.primal() >= 0.0 {
        S::one() / (S::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (S::one() + e)
    }
}

/// Value and Riemannian gradient of a discrete potential at `x`.
///
/// The gradient is assembled analytically — hard min picks the active
/// piece's `-log_x(y_i*)`, soft min forms the softmax-weighted convex
/// combination — so the same expression graph serves forward-mode
/// Jacobians and tape recording.
pub(crate) fn potential_value_grad<S: Scalar>(
    manifold: &Manifold,
    view: &PotentialView<S>,
    x: &[S],
    want_grad: bool,
) -> Result<(S, AVec<S>)> {
    let m = view.m();
    let dim = view.dim;
    debug_assert_eq!(dim, manifold.ambient_dim());

    if view.gamma == 0.0 {
        // hard min: pick the active piece (lowest-index tie-break), take
        // its -log_x(y)
        let mut piece: Vec<S> = Vec::with_capacity(m);
        let mut dots: Vec<S> = Vec::with_capacity(m * manifold.n_factors());
        for i in 0..m {
            let y = &view.ys[i * dim..(i + 1) * dim];
            let mut c = S::zero();
            for (off, fdim) in manifold.factor_slices() {
                let t = S::dot(&x[off..off + fdim], &y[off..off + fdim]);
                dots.push(t);
                c = c + sphere_cost(t);
            }
            piece.push(c + view.alphas[i]);
        }
        let mut best = 0;
        for i in 1..m {
            if piece[i].primal() < piece[best].primal() {
                best = i;
            }
        }
        let value = piece[best];
        let mut grad = AVec::zeros(dim);
        if want_grad {
            let y = &view.ys[best * dim..(best + 1) * dim];
            let n_factors = manifold.n_factors();
            for (f, (off, fdim)) in manifold.factor_slices().enumerate() {
                let mut lv = AVec::<S>::zeros(fdim);
                log_factor(
                    &x[off..off + fdim],
                    &y[off..off + fdim],
                    dots[best * n_factors + f],
                    &mut lv,
                )?;
                for j in 0..fdim {
                    grad[off + j] = -lv[j];
                }
            }
        }
        return Ok((value, grad));
    }

    // soft min: one pass per component shares the arccos between the cost
    // and the log-map scale; the gradient is then one fused softmax-weighted
    // reduction per ambient coordinate
    let neg_inv = S::from_f64(-1.0 / view.gamma);
    let mut scaled: Vec<S> = Vec::with_capacity(m);
    let mut neg_logs: Vec<S> = if want_grad { vec![S::zero(); m * dim] } else { Vec::new() };
    let mut stiff: Vec<(usize, f64)> = Vec::new();
    for i in 0..m {
        let y = &view.ys[i * dim..(i + 1) * dim];
        let mut c = S::zero();
        for (off, fdim) in manifold.factor_slices() {
            let t = S::dot(&x[off..off + fdim], &y[off..off + fdim]);
            if want_grad {
                if t.primal() <= -1.0 + crate::manifold::CUT_LOCUS_TOL {
                    stiff.push((i, t.primal()));
                }
                let (cost, scale) = crate::manifold::sphere_cost_and_log_scale(t);
                c = c + cost;
                for j in 0..fdim {
                    // -log_x(y)_j = scale * (t x_j - y_j)
                    neg_logs[i * dim + off + j] = scale * (t * x[off + j] - y[off + j]);
                }
            } else {
                c = c + sphere_cost(t);
            }
        }
        scaled.push((c + view.alphas[i]) * neg_inv);
    }
    let lse = S::log_sum_exp(&scaled);
    let value = lse * S::from_f64(-view.gamma);

    let mut grad = AVec::zeros(dim);
    if want_grad {
        // Near-antipodal components are an error state on the training path
        // (parameter-tracking scalars): their stiff contributions inject
        // gradient noise, and the event is skip-and-counted upstream. On
        // plain evaluation only a DOMINANT antipodal component is an error
        // -- the soft analog of the hard case's argmin-scoped cut-locus
        // rule -- because light components stay harmless near the antipode:
        // tangential derivatives of the inner product vanish like
        // sin(theta) there, so every contribution is O(weight).
        for &(i, inner) in &stiff {
            if S::TRACKS_PARAMETERS {
                return Err(Error::CutLocus { inner });
            }
            let w = (scaled[i].primal() - lse.primal()).exp();
            // the Jacobian contribution of a near-antipodal component grows
            // like w / sin(theta); bound both the weight and the distortion
            let clearance = (1.0 + inner).max(f64::MIN_POSITIVE);
            if w >= CUT_LOCUS_WEIGHT_TOL
                || w / (2.0 * clearance).sqrt() >= CUT_LOCUS_DISTORTION_TOL
            {
                return Err(Error::CutLocus { inner });
            }
        }
        // softmax weights reuse the shifted exponentials from the value pass
        let weights: Vec<S> = scaled.iter().map(|&u| (u - lse).exp()).collect();
        let mut col: Vec<S> = vec![S::zero(); m];
        for j in 0..dim {
            for i in 0..m {
                col[i] = neg_logs[i * dim + j];
            }
            grad[j] = S::dot(&weights, &col);
        }
    }
    Ok((value, grad))
}

/// Softmax-weight threshold above which a near-antipodal component makes
/// the soft gradient an error state rather than a negligible perturbation.
const CUT_LOCUS_WEIGHT_TOL: f64 = 1e-4;

/// Cap on `w / sin(theta)`, the size of a near-antipodal component's
/// Jacobian contribution; beyond this the transport is genuinely distorted
/// and evaluation errors rather than reporting spiked determinants.
const CUT_LOCUS_DISTORTION_TOL: f64 = 10.0;

/// Value and Riemannian gradient of a block potential: the mixing
/// recursion with the hard inner ReLU, then the optional outer ReLU.
pub(crate) fn block_value_grad<S: Scalar>(
    manifold: &Manifold,
    view: &BlockView<S>,
    x: &[S],
    want_grad: bool,
) -> Result<(S, AVec<S>)> {
    let dim = manifold.ambient_dim();
    let mut psi = S::zero();
    let mut dpsi = AVec::<S>::zeros(dim);
    for (k, layer) in view.layers.iter().enumerate() {
        let (phi, dphi) = potential_value_grad(manifold, layer, x, want_grad)?;
        let w = logistic_s(view.weights_raw[k]);
        let one_minus_w = S::one() - w;
        let sigma_active = psi.primal() < 0.0;
        let sigma = if sigma_active { psi } else { S::zero() };
        let next = one_minus_w * phi + w * sigma;
        if want_grad {
            for j in 0..dim {
                let a = one_minus_w * dphi[j];
                dpsi[j] = if sigma_active { (w * dpsi[j]) + a } else { a };
            }
        }
        psi = next;
    }
    if let Some(g2) = view.identity_relu {
        let (value, deriv) = concave_relu_value_deriv(psi, g2);
        if want_grad {
            for j in 0..dim {
                dpsi[j] = deriv * dpsi[j];
            }
        }
        psi = value;
    }
    Ok((psi, dpsi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::ManifoldDescriptor;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn s2() -> Manifold {
        ManifoldDescriptor::sphere(2).build().unwrap()
    }

    fn pt(m: &Manifold, coords: &[f64]) -> ManifoldPoint {
        ManifoldPoint::new(m, coords.to_vec()).unwrap()
    }

    fn random_potential(m: &Manifold, n: usize, gamma: f64, rng: &mut ChaCha8Rng) -> DiscretePotential {
        use rand::Rng;
        let components = m
            .sample_uniform::<f64, _>(rng, n)
            .into_iter()
            .map(|p| PotentialComponent { y: p.into_coords(), alpha: rng.random_range(-0.5..0.5) })
            .collect();
        DiscretePotential { components, gamma }
    }

    #[test]
    fn soft_min_single_element_is_identity() {
        assert_eq!(soft_min(&[3.0], 0.5), 3.0);
    }

    #[test]
    fn soft_min_of_equal_pair() {
        let a = 1.7;
        let gamma = 0.3;
        assert_relative_eq!(soft_min(&[a, a], gamma), a - gamma * 2.0f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn soft_min_approaches_hard_min() {
        let v = [1.0, 2.0, 3.0];
        let s = soft_min(&v, 0.01);
        assert!((s - 1.0).abs() < 1e-3);
        assert!(s <= 1.0);
        assert_eq!(soft_min(&v, 0.0), 1.0);
    }

    #[test]
    fn soft_min_bounds_and_monotonicity() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let n = rng.random_range(1..8);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let g1 = rng.random_range(1e-3..1.0f64);
            let g2 = g1 * rng.random_range(1.0..10.0);
            let s1 = soft_min(&v, g1);
            let s2 = soft_min(&v, g2);
            assert!(s1 <= min + 1e-12);
            assert!(s1 >= min - g1 * (n as f64).ln() - 1e-12);
            assert!(s1 >= s2 - 1e-12, "soft_min must decrease with temperature");
        }
    }

    #[test]
    fn eval_at_own_component_is_zero() {
        let m = s2();
        let x = pt(&m, &[0.0, 1.0, 0.0]);
        let p = DiscretePotential {
            components: vec![PotentialComponent { y: x.coords().to_vec(), alpha: 0.0 }],
            gamma: 0.0,
        };
        assert_eq!(p.eval(&m, &x), 0.0);
    }

    #[test]
    fn eval_picks_cheaper_piece() {
        let m = s2();
        let x = pt(&m, &[1.0, 0.0, 0.0]);
        let p = DiscretePotential {
            components: vec![
                PotentialComponent { y: vec![0.0, 1.0, 0.0], alpha: 0.0 },
                PotentialComponent { y: vec![1.0, 0.0, 0.0], alpha: 10.0 },
            ],
            gamma: 0.0,
        };
        assert_relative_eq!(p.eval(&m, &x), PI * PI / 8.0, epsilon = 1e-12);
    }

    #[test]
    fn soft_eval_close_to_hard_eval() {
        let m = s2();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let hard = random_potential(&m, 12, 0.0, &mut rng);
        let soft = DiscretePotential { components: hard.components.clone(), gamma: 1e-6 };
        for _ in 0..50 {
            let x: ManifoldPoint = m.sample_uniform_one(&mut rng);
            let diff = (hard.eval(&m, &x) - soft.eval(&m, &x)).abs();
            assert!(diff <= 1e-6 * (12.0f64).ln() + 1e-12);
        }
    }

    #[test]
    fn hard_grad_is_log_of_active_piece() {
        let m = s2();
        let x = pt(&m, &[1.0, 0.0, 0.0]);
        let y1 = vec![0.0, 1.0, 0.0];
        let p = DiscretePotential {
            components: vec![
                PotentialComponent { y: y1.clone(), alpha: 0.0 },
                PotentialComponent { y: vec![0.0, 0.0, -1.0], alpha: 5.0 },
            ],
            gamma: 0.0,
        };
        let g = p.grad(&m, &x).unwrap();
        let y1p = pt(&m, &y1);
        let expected = m.log_map(&x, &y1p).unwrap();
        for (a, b) in g.components.iter().zip(&expected.components) {
            assert_relative_eq!(*a, -b, epsilon = 1e-12);
        }
    }

    #[test]
    fn grad_at_own_single_component_is_zero() {
        let m = s2();
        let x = pt(&m, &[0.0, 0.0, 1.0]);
        let p = DiscretePotential {
            components: vec![PotentialComponent { y: x.coords().to_vec(), alpha: 0.0 }],
            gamma: 0.0,
        };
        let g = p.grad(&m, &x).unwrap();
        assert!(g.norm() < 1e-12);
    }

    #[test]
    fn soft_grad_weights_form_convex_combination() {
        // the gradient must lie in the convex hull of {-log_x(y_i)}; verify
        // by recomputing softmax weights and comparing the combination
        let m = s2();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = random_potential(&m, 8, 0.1, &mut rng);
        let x: ManifoldPoint = m.sample_uniform_one(&mut rng);

        let costs: Vec<f64> = p
            .components
            .iter()
            .map(|c| m.cost(&x, &pt(&m, &c.y)) + c.alpha)
            .collect();
        let min = costs.iter().cloned().fold(f64::INFINITY, f64::min);
        let unnorm: Vec<f64> = costs.iter().map(|c| (-(c - min) / 0.1).exp()).collect();
        let z: f64 = unnorm.iter().sum();
        let weights: Vec<f64> = unnorm.iter().map(|w| w / z).collect();
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(weights.iter().all(|&w| w >= 0.0));

        let mut expected = vec![0.0; 3];
        for (w, c) in weights.iter().zip(&p.components) {
            let lv = m.log_map(&x, &pt(&m, &c.y)).unwrap();
            for j in 0..3 {
                expected[j] -= w * lv.components[j];
            }
        }
        let g = p.grad(&m, &x).unwrap();
        for j in 0..3 {
            assert_relative_eq!(g.components[j], expected[j], epsilon = 1e-10);
        }
    }

    #[test]
    fn soft_grad_matches_finite_differences() {
        let m = s2();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let p = random_potential(&m, 10, 0.1, &mut rng);
        let h = 1e-5;
        for _ in 0..20 {
            let x: ManifoldPoint = m.sample_uniform_one(&mut rng);
            let g = p.grad(&m, &x).unwrap();
            for e in m.tangent_basis(&x) {
                let step = |sign: f64| {
                    let v = TangentVector::new(
                        &m,
                        x.clone(),
                        e.components.iter().map(|c| c * sign * h).collect(),
                    )
                    .unwrap();
                    p.eval(&m, &m.exp_map(&x, &v))
                };
                let fd = (step(1.0) - step(-1.0)) / (2.0 * h);
                let along = f64::dot(&g.components, &e.components);
                let denom = along.abs().max(fd.abs()).max(1e-3);
                assert!(
                    (along - fd).abs() / denom < 1e-5,
                    "directional derivative {along} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn soft_grad_is_tangent_per_factor_on_products() {
        let t2 = ManifoldDescriptor::torus2().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let p = random_potential(&t2, 12, 0.5, &mut rng);
        for _ in 0..50 {
            let x: ManifoldPoint = t2.sample_uniform_one(&mut rng);
            let g = p.grad(&t2, &x).unwrap();
            for (off, dim) in t2.factor_slices() {
                let inner: f64 = (off..off + dim)
                    .map(|k| x.coords()[k] * g.components[k])
                    .sum();
                assert!(inner.abs() < 1e-12, "factor at {off} not tangent: {inner}");
            }
        }
    }

    #[test]
    fn soft_grad_matches_finite_differences_on_torus() {
        let t2 = ManifoldDescriptor::torus2().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let p = random_potential(&t2, 8, 0.5, &mut rng);
        let h = 1e-5;
        for _ in 0..10 {
            let x: ManifoldPoint = t2.sample_uniform_one(&mut rng);
            let g = p.grad(&t2, &x).unwrap();
            for e in t2.tangent_basis(&x) {
                let step = |sign: f64| {
                    let v = TangentVector::new(
                        &t2,
                        x.clone(),
                        e.components.iter().map(|c| c * sign * h).collect(),
                    )
                    .unwrap();
                    p.eval(&t2, &t2.exp_map(&x, &v))
                };
                let fd = (step(1.0) - step(-1.0)) / (2.0 * h);
                let along = f64::dot(&g.components, &e.components);
                let denom = along.abs().max(fd.abs()).max(1e-3);
                assert!((along - fd).abs() / denom < 1e-5, "{along} vs {fd}");
            }
        }
    }

    #[test]
    fn hard_argmin_stable_under_small_perturbation() {
        let m = s2();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let p = random_potential(&m, 6, 0.0, &mut rng);
        let x: ManifoldPoint = m.sample_uniform_one(&mut rng);
        let active = |x: &ManifoldPoint| {
            let mut best = 0;
            let mut bestv = f64::INFINITY;
            for (i, c) in p.components.iter().enumerate() {
                let v = m.cost(x, &pt(&m, &c.y)) + c.alpha;
                if v < bestv {
                    bestv = v;
                    best = i;
                }
            }
            best
        };
        // margin between best and second best
        let mut vals: Vec<f64> = p
            .components
            .iter()
            .map(|c| m.cost(&x, &pt(&m, &c.y)) + c.alpha)
            .collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let margin = vals[1] - vals[0];
        let i0 = active(&x);
        for e in m.tangent_basis(&x) {
            let v = TangentVector::new(
                &m,
                x.clone(),
                e.components.iter().map(|c| c * margin * 0.05).collect(),
            )
            .unwrap();
            assert_eq!(active(&m.exp_map(&x, &v)), i0);
        }
    }

    #[test]
    fn concave_relu_cases() {
        assert_eq!(concave_relu(-2.0, 0.0), -2.0);
        assert_eq!(concave_relu(3.0, 0.0), 0.0);
        assert_relative_eq!(concave_relu(0.0, 0.5), -0.5 * 2.0f64.ln(), epsilon = 1e-14);
        // soft version approaches hard as gamma2 -> 0
        assert!((concave_relu(-1.0, 1e-6) - (-1.0)).abs() < 1e-5);
        assert!(concave_relu(1.0, 1e-6).abs() < 1e-5);
    }

    #[test]
    fn block_with_single_unweighted_layer_reduces_to_potential() {
        let m = s2();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let layer = random_potential(&m, 5, 0.1, &mut rng);
        // w = 0 exactly requires raw = -inf; logistic(-50) is zero to f64
        let block = BlockPotential {
            layers: vec![layer.clone()],
            weights_raw: vec![-50.0],
            identity_relu: None,
        };
        for _ in 0..20 {
            let x: ManifoldPoint = m.sample_uniform_one(&mut rng);
            assert_relative_eq!(block.eval(&m, &x), layer.eval(&m, &x), epsilon = 1e-14);
        }
    }

    #[test]
    fn identity_initialized_block_is_exactly_zero() {
        use rand::Rng;
        let m = s2();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        // all offsets >= 0, hard min, hard outer ReLU
        let mut mk = |gamma: f64| {
            let components = m
                .sample_uniform::<f64, _>(&mut rng, 7)
                .into_iter()
                .map(|p| PotentialComponent { y: p.into_coords(), alpha: rng.random_range(0.0..1.0) })
                .collect();
            DiscretePotential { components, gamma }
        };
        let block = BlockPotential {
            layers: vec![mk(0.0), mk(0.0)],
            weights_raw: vec![0.3, -0.4],
            identity_relu: Some(0.0),
        };
        for _ in 0..1000 {
            let x: ManifoldPoint = m.sample_uniform_one(&mut rng);
            assert_eq!(block.eval(&m, &x), 0.0);
            let g = block.grad(&m, &x).unwrap();
            assert!(g.components.iter().all(|&c| c == 0.0));
        }
    }

    #[test]
    fn two_layer_block_hand_case() {
        // w = (0, 0.5); phi_0 has value 2 at x (single component at x with
        // alpha = 2); psi_2 = 0.5 * phi_1 + 0.5 * sigma(2) = 0.5 * phi_1
        let m = s2();
        let x = pt(&m, &[0.0, 1.0, 0.0]);
        let phi0 = DiscretePotential {
            components: vec![PotentialComponent { y: x.coords().to_vec(), alpha: 2.0 }],
            gamma: 0.0,
        };
        let phi1 = DiscretePotential {
            components: vec![PotentialComponent { y: vec![0.0, 0.0, 1.0], alpha: -0.7 }],
            gamma: 0.0,
        };
        let v = phi1.eval(&m, &x);
        let block = BlockPotential {
            layers: vec![phi0, phi1.clone()],
            weights_raw: vec![-50.0, 0.0], // logistic: 0 and 0.5
            identity_relu: None,
        };
        assert_relative_eq!(block.eval(&m, &x), 0.5 * v, epsilon = 1e-12);
    }

    #[test]
    fn block_grad_matches_finite_differences() {
        let m = s2();
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let block = BlockPotential {
            layers: vec![
                random_potential(&m, 6, 0.1, &mut rng),
                random_potential(&m, 4, 0.05, &mut rng),
                random_potential(&m, 5, 0.5, &mut rng),
            ],
            weights_raw: vec![0.2, -0.3, 0.8],
            identity_relu: Some(0.05),
        };
        let h = 1e-5;
        for _ in 0..10 {
            let x: ManifoldPoint = m.sample_uniform_one(&mut rng);
            let g = block.grad(&m, &x).unwrap();
            for e in m.tangent_basis(&x) {
                let step = |sign: f64| {
                    let v = TangentVector::new(
                        &m,
                        x.clone(),
                        e.components.iter().map(|c| c * sign * h).collect(),
                    )
                    .unwrap();
                    block.eval(&m, &m.exp_map(&x, &v))
                };
                let fd = (step(1.0) - step(-1.0)) / (2.0 * h);
                let along = f64::dot(&g.components, &e.components);
                let denom = along.abs().max(fd.abs()).max(1e-3);
                assert!((along - fd).abs() / denom < 1e-5);
            }
        }
    }

    #[test]
    fn block_serde_round_trips_raw_weights() {
        let m = s2();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let block = BlockPotential {
            layers: vec![random_potential(&m, 3, 0.1, &mut rng)],
            weights_raw: vec![1.25],
            identity_relu: Some(0.05),
        };
        let json = serde_json::to_string(&block).unwrap();
        assert!(json.contains("\"weights\""));
        assert!(json.contains("\"identity_relu\":0.05"));
        let back: BlockPotential = serde_json::from_str(&json).unwrap();
        assert_eq!(back, block);

        // wire format without raw weights still loads via the logit
        let wire = r#"{"layers":[{"components":[{"y":[1.0,0.0,0.0],"alpha":0.1}],"gamma":0.0}],"weights":[0.5],"identity_relu":null}"#;
        let b2: BlockPotential = serde_json::from_str(wire).unwrap();
        assert!(b2.weights_raw[0].abs() < 1e-12);
    }
}
