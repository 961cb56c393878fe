//! Parameter gradients d(loss)/d(theta) for flows, theta = {y_i, alpha_i,
//! w_k}, by reverse-mode accumulation on a per-sample tape.
//!
//! Each batch element lifts the flow parameters as tape leaves, rebuilds the
//! loss expression (transport, log-determinant, densities) in [`Var`]
//! arithmetic, and runs one reverse sweep. Log-determinants are
//! differentiated reverse-over-forward: the forward-mode Jacobian lanes are
//! themselves recorded on the tape. Batch elements record independent tapes
//! and reduce in fixed order, so results are bitwise reproducible for any
//! thread count.
//!
//! The independent oracle for all of this is [`grad_check`]: central finite
//! differences of the plain (tape-free) loss over every parameter
//! coordinate.

use crate::density::Density;
use crate::error::{Error, Result};
use crate::flow::{flow_push_logdet, Flow};
use crate::manifold::{Manifold, ManifoldPoint};
use crate::potential::BlockView;
use crate::scalar::Scalar;
use crate::tape::{self, Var};
use rayon::prelude::*;
use serde::Serialize;

/// Gradients mirroring the flow parameter tree. `d_y` entries are ambient
/// vectors; the trainer tangent-projects them at `y_i` before use. `d_w`
/// is with respect to the unconstrained pre-squash mixing scalar.
#[derive(Clone, Debug)]
pub struct ParamGradient {
    pub blocks: Vec<BlockGradient>,
}

#[derive(Clone, Debug)]
pub struct BlockGradient {
    pub layers: Vec<LayerGradient>,
    pub d_weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LayerGradient {
    pub d_y: Vec<Vec<f64>>,
    pub d_alpha: Vec<f64>,
}

impl ParamGradient {
    pub fn zeros_like(flow: &Flow) -> Self {
        let blocks = flow
            .blocks
            .iter()
            .map(|b| BlockGradient {
                layers: b
                    .layers
                    .iter()
                    .map(|l| LayerGradient {
                        d_y: l.components.iter().map(|c| vec![0.0; c.y.len()]).collect(),
                        d_alpha: vec![0.0; l.components.len()],
                    })
                    .collect(),
                d_weights: vec![0.0; b.weights_raw.len()],
            })
            .collect();
        Self { blocks }
    }

    pub fn add_assign(&mut self, other: &ParamGradient) {
        self.for_each_with(other, |a, b| *a += b);
    }

    pub fn scale(&mut self, s: f64) {
        self.for_each(|a| *a *= s);
    }

    pub fn for_each(&mut self, mut f: impl FnMut(&mut f64)) {
        for b in &mut self.blocks {
            for l in &mut b.layers {
                for y in &mut l.d_y {
                    y.iter_mut().for_each(&mut f);
                }
                l.d_alpha.iter_mut().for_each(&mut f);
            }
            b.d_weights.iter_mut().for_each(&mut f);
        }
    }

    fn for_each_with(&mut self, other: &ParamGradient, mut f: impl FnMut(&mut f64, f64)) {
        for (b, ob) in self.blocks.iter_mut().zip(&other.blocks) {
            for (l, ol) in b.layers.iter_mut().zip(&ob.layers) {
                for (y, oy) in l.d_y.iter_mut().zip(&ol.d_y) {
                    for (a, &ov) in y.iter_mut().zip(oy) {
                        f(a, ov);
                    }
                }
                for (a, &ov) in l.d_alpha.iter_mut().zip(&ol.d_alpha) {
                    f(a, ov);
                }
            }
            for (a, &ov) in b.d_weights.iter_mut().zip(&ob.d_weights) {
                f(a, ov);
            }
        }
    }
}

/// Which loss a gradient evaluation drives.
#[derive(Clone, Copy)]
pub enum LossSpec<'a> {
    /// Reverse KL: batch drawn from `base`, loss
    /// `E[log mu(x) - logdet - log nu(s(x))]`.
    ReverseKl { base: &'a Density, target: &'a Density },
    /// Negative log-likelihood: batch drawn from the data, loss
    /// `-E[log mu(s(x)) + logdet]` for a backward-direction flow.
    Nll { base: &'a Density },
}

/// Outcome of a batch gradient evaluation. `skipped_cutlocus` counts batch
/// elements dropped because the flow hit a cut locus (measure-zero events
/// surfaced rather than subgradiented).
pub struct LossAndGrad {
    pub loss: f64,
    pub grad: ParamGradient,
    pub skipped_cutlocus: usize,
}

/// Monte-Carlo batch loss and parameter gradient.
pub fn loss_and_grad(
    flow: &Flow,
    manifold: &Manifold,
    spec: LossSpec<'_>,
    batch: &[ManifoldPoint],
) -> Result<LossAndGrad> {
    loss_and_grad_impl(flow, manifold, batch, |views, x| per_sample_loss(manifold, views, x, spec))
}

fn per_sample_loss(
    manifold: &Manifold,
    views: &[BlockView<Var>],
    x: &ManifoldPoint,
    spec: LossSpec<'_>,
) -> Result<Var> {
    let x_vars: Vec<Var> = x.coords().iter().map(|&c| tape::leaf(c)).collect();
    let (pushed, logdet, _) = flow_push_logdet(manifold, views, &x_vars)?;
    Ok(match spec {
        LossSpec::ReverseKl { base, target } => {
            let target_ld = target.log_density_s(&pushed);
            Var::from_f64(base.log_density(x)) - logdet - target_ld
        }
        LossSpec::Nll { base } => {
            let base_ld = base.log_density_s(&pushed);
            -(base_ld + logdet)
        }
    })
}

fn loss_and_grad_impl(
    flow: &Flow,
    _manifold: &Manifold,
    batch: &[ManifoldPoint],
    per_sample: impl Fn(&[BlockView<Var>], &ManifoldPoint) -> Result<Var> + Sync,
) -> Result<LossAndGrad> {
    if batch.is_empty() {
        return Err(Error::InvalidBatch("gradient evaluation needs a nonempty batch".into()));
    }
    // fixed chunk size: the reduction order is independent of thread count
    const CHUNK: usize = 16;
    let chunks: Vec<Result<(f64, ParamGradient, usize, usize)>> = batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut loss = 0.0;
            let mut grad = ParamGradient::zeros_like(flow);
            let mut used = 0usize;
            let mut skipped = 0usize;
            for (i, x) in chunk.iter().enumerate() {
                tape::reset();
                let mut n_leaves = 0usize;
                let views: Vec<BlockView<Var>> = flow.views(&mut |v| {
                    n_leaves += 1;
                    tape::leaf(v)
                });
                match per_sample(&views, x) {
                    Ok(sample_loss) => {
                        let value = sample_loss.value();
                        if !value.is_finite() {
                            return Err(Error::NonFiniteLoss {
                                step: 0,
                                sample: ci * CHUNK + i,
                                value,
                            });
                        }
                        loss += value;
                        let g = tape::backward_prefix(sample_loss, n_leaves + 2);
                        accumulate(&mut grad, &g);
                        used += 1;
                    }
                    Err(Error::CutLocus { .. }) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            Ok((loss, grad, used, skipped))
        })
        .collect();

    let mut loss = 0.0;
    let mut grad = ParamGradient::zeros_like(flow);
    let mut used = 0usize;
    let mut skipped = 0usize;
    for c in chunks {
        let (l, g, u, s) = c?;
        loss += l;
        grad.add_assign(&g);
        used += u;
        skipped += s;
    }
    if used == 0 {
        return Err(Error::InvalidBatch(format!(
            "all {} batch elements hit the cut locus",
            batch.len()
        )));
    }
    let inv = 1.0 / used as f64;
    grad.scale(inv);
    Ok(LossAndGrad { loss: loss * inv, grad, skipped_cutlocus: skipped })
}

/// Reads leaf gradients back into the parameter tree. Leaves were
/// registered in flow order: per block, per layer, per component the `D`
/// location coordinates then the offset, then the block's mixing scalars.
fn accumulate(grad: &mut ParamGradient, leaf_grads: &[f64]) {
    let mut id = 2usize; // slots 0 and 1 hold the interned constants
    for b in &mut grad.blocks {
        for l in &mut b.layers {
            for (y, a) in l.d_y.iter_mut().zip(&mut l.d_alpha) {
                for c in y.iter_mut() {
                    *c += leaf_grads[id];
                    id += 1;
                }
                *a += leaf_grads[id];
                id += 1;
            }
        }
        for w in &mut b.d_weights {
            *w += leaf_grads[id];
            id += 1;
        }
    }
    debug_assert_eq!(id, leaf_grads.len());
}

/// Smallest cut-locus clearance `1 + <x, y_i>` (per sphere factor) over
/// every potential component met along the flow, evaluated at the running
/// intermediate points.
///
/// The loss is smooth away from the cut locus but becomes arbitrarily
/// stiff as the clearance shrinks (the log-map scale grows like
/// `1/sqrt(clearance)`), which invalidates fixed-step finite differences
/// long before the analytic gradient degrades. Finite-difference checks
/// should therefore run on batches whose clearance stays above a margin;
/// see [`fd_safe_batch`].
pub fn cut_locus_clearance(flow: &Flow, manifold: &Manifold, x: &ManifoldPoint) -> Result<f64> {
    let mut clearance = f64::INFINITY;
    let mut p = x.clone();
    for block in &flow.blocks {
        for layer in &block.layers {
            for comp in &layer.components {
                for (off, dim) in manifold.factor_slices() {
                    let t = f64::dot(&p.coords()[off..off + dim], &comp.y[off..off + dim]);
                    clearance = clearance.min(1.0 + t);
                }
            }
        }
        p = crate::flow::apply_block(manifold, block, &p)?;
    }
    Ok(clearance)
}

/// Draws points from `sample` until `n` of them keep a cut-locus
/// clearance of at least `margin` along the whole flow. The rejected
/// fraction is tiny for generic flows; the margin excludes the
/// finite-difference-hostile region the same way the verification oracles
/// skip piece boundaries.
pub fn fd_safe_batch(
    flow: &Flow,
    manifold: &Manifold,
    mut sample: impl FnMut() -> ManifoldPoint,
    n: usize,
    margin: f64,
) -> Result<Vec<ManifoldPoint>> {
    let mut batch = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while batch.len() < n {
        attempts += 1;
        if attempts > 100 + 20 * n {
            return Err(Error::InvalidBatch(format!(
                "could not find {n} batch points with cut-locus clearance {margin}"
            )));
        }
        let x = sample();
        match cut_locus_clearance(flow, manifold, &x) {
            Ok(c) if c >= margin => batch.push(x),
            Ok(_) => {}
            Err(Error::CutLocus { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(batch)
}

/// Plain (tape-free) batch loss; the evaluation path finite differences
/// are taken over. Applies the same cut-locus skip policy as
/// [`loss_and_grad`].
pub fn batch_loss(
    flow: &Flow,
    manifold: &Manifold,
    spec: LossSpec<'_>,
    batch: &[ManifoldPoint],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidBatch("loss evaluation needs a nonempty batch".into()));
    }
    let views = flow.views(&mut f64::from_f64);
    let mut loss = 0.0;
    let mut used = 0usize;
    for x in batch {
        match flow_push_logdet(manifold, &views, x.coords()) {
            Ok((pushed, logdet, _)) => {
                let term = match spec {
                    LossSpec::ReverseKl { base, target } => {
                        base.log_density(x) - logdet - target.log_density_s(&pushed)
                    }
                    LossSpec::Nll { base } => -(base.log_density_s(&pushed) + logdet),
                };
                loss += term;
                used += 1;
            }
            Err(Error::CutLocus { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::InvalidBatch("all batch elements hit the cut locus".into()));
    }
    Ok(loss / used as f64)
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamClass {
    Y,
    Alpha,
    Weight,
}

/// Worst relative error per parameter class.
#[derive(Clone, Debug, Serialize)]
pub struct ClassReport {
    pub n_params: usize,
    pub max_rel_err: f64,
    /// Coordinate of the worst disagreement, as `block/layer/component/..`.
    pub worst: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tol: f64,
    pub fd_step: f64,
    pub y: ClassReport,
    pub alpha: ClassReport,
    pub weight: ClassReport,
    pub pass: bool,
    /// With hard-min layers (`gamma = 0`) the offsets receive no gradient;
    /// set when such layers exist and records whether their analytic
    /// alpha-gradients were identically zero, as they must be.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hard_alpha_identically_zero: Option<bool>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.y.max_rel_err.max(self.alpha.max_rel_err).max(self.weight.max_rel_err)
    }
}

/// Central finite differences (step `h = 1e-5`) of the batch loss over
/// every parameter coordinate, compared to the tape gradient. Relative
/// errors use an absolute floor of `1e-7` (denominator floor `1e-7/tol`).
pub fn grad_check(
    flow: &Flow,
    manifold: &Manifold,
    spec: LossSpec<'_>,
    batch: &[ManifoldPoint],
    tol: f64,
) -> Result<GradCheckReport> {
    let lg = loss_and_grad(flow, manifold, spec, batch)?;
    grad_check_against(flow, manifold, spec, batch, tol, &lg.grad)
}

/// Compares a given analytic gradient against finite differences; split
/// out so the test harness can inject corrupted gradients.
fn grad_check_against(
    flow: &Flow,
    manifold: &Manifold,
    spec: LossSpec<'_>,
    batch: &[ManifoldPoint],
    tol: f64,
    analytic_grad: &ParamGradient,
) -> Result<GradCheckReport> {
    let h = 1e-5;
    let floor = 1e-7 / tol;

    let mut reports = [
        ClassReport { n_params: 0, max_rel_err: 0.0, worst: String::new() },
        ClassReport { n_params: 0, max_rel_err: 0.0, worst: String::new() },
        ClassReport { n_params: 0, max_rel_err: 0.0, worst: String::new() },
    ];
    let mut hard_alpha_zero: Option<bool> = None;

    let coords = enumerate_params(flow);
    // FD evaluations fan out over parameters; each clone perturbs one
    // coordinate
    let errs: Vec<Result<f64>> = coords
        .par_iter()
        .map(|c| {
            let mut plus = flow.clone();
            *param_mut(&mut plus, c) += h;
            let lp = batch_loss(&plus, manifold, spec, batch)?;
            let mut minus = flow.clone();
            *param_mut(&mut minus, c) -= h;
            let lm = batch_loss(&minus, manifold, spec, batch)?;
            Ok((lp - lm) / (2.0 * h))
        })
        .collect();

    for (c, fd) in coords.iter().zip(errs) {
        let fd = fd?;
        let analytic = *param_of(analytic_grad, c);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(floor);
        let r = &mut reports[c.class as usize];
        r.n_params += 1;
        if rel > r.max_rel_err {
            r.max_rel_err = rel;
            r.worst = c.label();
        }
        if c.class == ParamClass::Alpha && flow.blocks[c.block].layers[c.layer].gamma == 0.0 {
            let zero = analytic == 0.0;
            hard_alpha_zero = Some(hard_alpha_zero.unwrap_or(true) && zero);
        }
    }

    let [y, alpha, weight] = reports;
    let pass = y.max_rel_err <= tol
        && alpha.max_rel_err <= tol
        && weight.max_rel_err <= tol
        && hard_alpha_zero != Some(false);
    Ok(GradCheckReport {
        tol,
        fd_step: h,
        y,
        alpha,
        weight,
        pass,
        hard_alpha_identically_zero: hard_alpha_zero,
    })
}

#[derive(Clone, Copy)]
struct ParamCoord {
    class: ParamClass,
    block: usize,
    layer: usize,
    component: usize,
    coord: usize,
}

impl ParamCoord {
    fn label(&self) -> String {
        match self.class {
            ParamClass::Y => format!(
                "block {}/layer {}/y[{}][{}]",
                self.block, self.layer, self.component, self.coord
            ),
            ParamClass::Alpha => {
                format!("block {}/layer {}/alpha[{}]", self.block, self.layer, self.component)
            }
            ParamClass::Weight => format!("block {}/w[{}]", self.block, self.layer),
        }
    }
}

fn enumerate_params(flow: &Flow) -> Vec<ParamCoord> {
    let mut out = Vec::new();
    for (bi, b) in flow.blocks.iter().enumerate() {
        for (li, l) in b.layers.iter().enumerate() {
            for (ci, c) in l.components.iter().enumerate() {
                for k in 0..c.y.len() {
                    out.push(ParamCoord {
                        class: ParamClass::Y,
                        block: bi,
                        layer: li,
                        component: ci,
                        coord: k,
                    });
                }
                out.push(ParamCoord {
                    class: ParamClass::Alpha,
                    block: bi,
                    layer: li,
                    component: ci,
                    coord: 0,
                });
            }
        }
        for (wi, _) in b.weights_raw.iter().enumerate() {
            out.push(ParamCoord {
                class: ParamClass::Weight,
                block: bi,
                layer: wi,
                component: 0,
                coord: 0,
            });
        }
    }
    out
}

fn param_mut<'a>(flow: &'a mut Flow, c: &ParamCoord) -> &'a mut f64 {
    match c.class {
        ParamClass::Y => &mut flow.blocks[c.block].layers[c.layer].components[c.component].y[c.coord],
        ParamClass::Alpha => &mut flow.blocks[c.block].layers[c.layer].components[c.component].alpha,
        ParamClass::Weight => &mut flow.blocks[c.block].weights_raw[c.layer],
    }
}

fn param_of<'a>(g: &'a ParamGradient, c: &ParamCoord) -> &'a f64 {
    match c.class {
        ParamClass::Y => &g.blocks[c.block].layers[c.layer].d_y[c.component][c.coord],
        ParamClass::Alpha => &g.blocks[c.block].layers[c.layer].d_alpha[c.component],
        ParamClass::Weight => &g.blocks[c.block].d_weights[c.layer],
    }
}
