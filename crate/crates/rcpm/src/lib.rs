//! Normalizing flows on compact Riemannian manifolds built from discrete
//! c-concave potentials pushed through exponential maps.
//!
//! A block transports by one optimal-transport step
//! `s(x) = exp_x(-grad phi(x))` with `phi(x) = min_i (c(x, y_i) + alpha_i)`
//! (soft-min smoothed); a flow composes `T` blocks over a sphere, circle,
//! or product of such factors (tori). Training fits the parameters
//! `{y_i, alpha_i, w_k}` by reverse KL or maximum likelihood with Adam and
//! manifold retraction; change of variables runs through tangent-basis
//! Jacobian log-determinants computed with forward-mode lanes.
//!
//! Core math is written once against the [`Scalar`] trait and served to
//! `f32`/`f64` evaluation, forward-mode duals ([`dual::DualN`]), and the
//! reverse-mode tape ([`tape::Var`]); concrete `f64` aliases live at the
//! crate root.

pub mod avec;
pub mod density;
pub mod diffengine;
pub mod dual;
pub mod error;
pub mod flow;
pub mod grid;
pub mod manifold;
pub mod potential;
pub mod scalar;
pub mod tape;
pub mod training;
pub mod verify;

pub use density::{sample_wrapped_gaussian, Density, DensitySpec};
pub use diffengine::{
    batch_loss, cut_locus_clearance, fd_safe_batch, grad_check, loss_and_grad, GradCheckReport,
    LossSpec, ParamGradient,
};
pub use error::{Error, Result};
pub use flow::{
    apply_block, block_jacobian_logdet, transport_geodesic, Direction, Flow, PushedDensity,
    SampleBatch,
};
pub use manifold::{Manifold, ManifoldDescriptor, ManifoldPoint, TangentVector};
pub use potential::{concave_relu, soft_min, BlockPotential, DiscretePotential, PotentialComponent};
pub use scalar::{Real, Scalar};
pub use training::{
    ess, evaluate, nll_loss, reverse_kl_loss, train, EvalReport, LossKind, TraceRow, TrainConfig,
    TrainOutput, TrainedModel,
};

/// Concrete `f64` aliases for the scalar-generic geometry types.
pub type Point = ManifoldPoint<f64>;
pub type Tangent = TangentVector<f64>;
pub type Point32 = ManifoldPoint<f32>;
pub type Tangent32 = TangentVector<f32>;
