//! Training: configurations, the Adam loop with manifold retraction of
//! component locations, loss functions, and evaluation metrics (Monte-Carlo
//! KL with standard error, importance-sampling effective sample size).
//!
//! Reverse-KL training parameterizes the forward (base-to-target) map and
//! draws batches from the base; likelihood training parameterizes the
//! backward (data-to-base) map and draws batches from the data. Either way
//! every run is fully determined by its seed: batches come from one
//! `ChaCha8` stream, gradient reductions are fixed-order, and the Adam
//! update is sequential.

use crate::density::{Density, DensitySpec};
use crate::diffengine::{loss_and_grad, LossSpec, ParamGradient};
use crate::error::{Error, Result};
use crate::flow::{flow_push_logdet, Direction, Flow};
use crate::manifold::{Manifold, ManifoldDescriptor, ManifoldPoint};
use crate::potential::{BlockPotential, DiscretePotential, PotentialComponent};
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "kl")]
    ReverseKl,
    #[serde(rename = "nll")]
    Nll,
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub manifold: ManifoldDescriptor,
    #[serde(default = "default_base")]
    pub base: DensitySpec,
    pub target: DensitySpec,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    /// Number of flow blocks `T`.
    pub blocks: usize,
    /// Discrete potentials per block `K`.
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Components per potential `m`.
    pub components: usize,
    /// Soft-min temperature of the potentials.
    pub gamma: f64,
    /// Outer concave-ReLU temperature; `null` disables the outer ReLU.
    #[serde(default)]
    pub gamma2: Option<f64>,
    #[serde(default = "default_alpha_min")]
    pub alpha_min: f64,
    #[serde(default = "default_alpha_range")]
    pub alpha_range: f64,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    pub batch_size: usize,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
}

fn default_base() -> DensitySpec {
    DensitySpec::Uniform
}
fn default_loss() -> LossKind {
    LossKind::ReverseKl
}
fn default_layers() -> usize {
    1
}
fn default_alpha_min() -> f64 {
    0.1
}
fn default_alpha_range() -> f64 {
    0.5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.99
}
fn default_eval_samples() -> usize {
    100_000
}

impl TrainConfig {
    /// Hard validation plus soft sweep-range warnings. Values outside the
    /// published sweep ranges are allowed — the sweep is guidance — but
    /// reported.
    pub fn validate(&self) -> Result<Vec<String>> {
        self.manifold.build()?;
        if self.blocks == 0 || self.layers == 0 || self.components == 0 {
            return Err(Error::InvalidConfig("blocks, layers, components must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.gamma >= 0.0) || !self.gamma2.map_or(true, |g| g >= 0.0) {
            return Err(Error::InvalidConfig("gamma temperatures must be >= 0".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::InvalidConfig("beta1, beta2 must lie in (0, 1)".into()));
        }
        if !(self.alpha_range >= 0.0) {
            return Err(Error::InvalidConfig("alpha_range must be >= 0".into()));
        }

        let mut warnings = Vec::new();
        if !(1e-6..=1e-1).contains(&self.learning_rate) {
            warnings.push(format!(
                "learning_rate {} outside the sweep range [1e-6, 1e-1]",
                self.learning_rate
            ));
        }
        if !(50..=1000).contains(&self.components) {
            warnings.push(format!("components {} outside the sweep range [50, 1000]", self.components));
        }
        if !(1e-5..=10.0).contains(&self.alpha_min) {
            warnings.push(format!("alpha_min {} outside the sweep range [1e-5, 10]", self.alpha_min));
        }
        if !(1e-3..=1.0).contains(&self.alpha_range) {
            warnings.push(format!("alpha_range {} outside the sweep range [1e-3, 1]", self.alpha_range));
        }
        if ![0.01, 0.05, 0.1, 0.5].contains(&self.gamma) {
            warnings.push(format!("gamma {} not among the swept values {{0.01, 0.05, 0.1, 0.5}}", self.gamma));
        }
        if let Some(g2) = self.gamma2 {
            if ![0.01, 0.05, 0.1, 0.5].contains(&g2) {
                warnings.push(format!("gamma2 {g2} not among the swept values"));
            }
        }
        Ok(warnings)
    }

    pub fn direction(&self) -> Direction {
        match self.loss {
            LossKind::ReverseKl => Direction::Forward,
            LossKind::Nll => Direction::Backward,
        }
    }
}

/// Evaluation metrics of a trained flow.
///
/// `kl_nats` is the Monte-Carlo KL estimate in the trainable direction
/// (reverse KL for forward flows, forward KL for backward flows) with its
/// standard error; `ess_percent` the importance-sampling effective sample
/// size as a percentage of the evaluation batch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub kl_nats: f64,
    pub kl_stderr: f64,
    pub ess_percent: f64,
    pub n_eval: usize,
    pub rejected_cutlocus: usize,
    pub wallclock_per_iter: f64,
}

/// One row of the loss trace.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub wallclock: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelMeta {
    pub version: String,
    pub config: TrainConfig,
}

/// A trained flow with its direction and provenance; serializes as
/// `{"manifold":…,"blocks":[…],"direction":…,"meta":{…}}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainedModel {
    #[serde(flatten)]
    pub flow: Flow,
    pub direction: Direction,
    pub meta: ModelMeta,
}

impl TrainedModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub struct TrainOutput {
    pub model: TrainedModel,
    pub report: EvalReport,
    pub trace: Vec<TraceRow>,
    pub warnings: Vec<String>,
}

/// Monte-Carlo reverse KL `E_x~base[log mu(x) - logdet - log nu(s(x))]`
/// over a given batch.
pub fn reverse_kl_loss(
    flow: &Flow,
    manifold: &Manifold,
    base: &Density,
    target: &Density,
    batch: &[ManifoldPoint],
) -> Result<f64> {
    crate::diffengine::batch_loss(flow, manifold, LossSpec::ReverseKl { base, target }, batch)
}

/// Monte-Carlo negative log-likelihood `-E[log mu(s(x)) + logdet]` of a
/// backward-direction flow over a data batch.
pub fn nll_loss(
    flow: &Flow,
    manifold: &Manifold,
    base: &Density,
    data_batch: &[ManifoldPoint],
) -> Result<f64> {
    crate::diffengine::batch_loss(flow, manifold, LossSpec::Nll { base }, data_batch)
}

/// Importance-sampling effective sample size, in percent:
/// `100 (Σw)^2 / (n Σw^2)` with `w_i = nu(s(x_i)) / nu_theta(s(x_i))`,
/// `x_i ~ mu`.
pub fn ess<R: Rng + ?Sized>(
    flow: &Flow,
    manifold: &Manifold,
    base: &Density,
    target: &Density,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidBatch("ess needs at least one sample".into()));
    }
    let batch: Vec<ManifoldPoint> = base.sample(rng, n);
    let views = flow.views(&mut f64::from_f64);
    let mut log_w = Vec::with_capacity(n);
    for x in &batch {
        match flow_push_logdet(manifold, &views, x.coords()) {
            Ok((pushed, logdet, _)) => {
                let model_ld = base.log_density(x) - logdet;
                let target_ld: f64 = target.log_density_s(&pushed);
                log_w.push(target_ld - model_ld);
            }
            Err(Error::CutLocus { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(ess_from_log_weights(&log_w))
}

fn ess_from_log_weights(log_w: &[f64]) -> f64 {
    if log_w.is_empty() {
        return 0.0;
    }
    let l1 = f64::log_sum_exp(log_w);
    let doubled: Vec<f64> = log_w.iter().map(|w| 2.0 * w).collect();
    let l2 = f64::log_sum_exp(&doubled);
    100.0 * (2.0 * l1 - (log_w.len() as f64).ln() - l2).exp()
}

/// Fixed offset between the training stream and the held-out evaluation
/// stream.
const EVAL_SEED_OFFSET: u64 = 0x9E3779B97F4A7C15;

/// Runs the full Adam loop and evaluates the result on a held-out batch.
/// Deterministic in `config.seed`: identical configurations produce
/// byte-identical serialized models.
pub fn train(config: &TrainConfig) -> Result<TrainOutput> {
    let warnings = config.validate()?;
    let manifold = config.manifold.build()?;
    let base = Density::new(&manifold, config.base.clone())?;
    let target = Density::new(&manifold, config.target.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut flow = init_flow(config, &manifold, &mut rng);
    flow.validate()?;

    let mut adam = AdamState::zeros(&flow);
    let mut trace = Vec::with_capacity(config.steps);
    let start = Instant::now();
    for step in 0..config.steps {
        let batch: Vec<ManifoldPoint> = match config.loss {
            LossKind::ReverseKl => base.sample(&mut rng, config.batch_size),
            LossKind::Nll => target.sample(&mut rng, config.batch_size),
        };
        let spec = match config.loss {
            LossKind::ReverseKl => LossSpec::ReverseKl { base: &base, target: &target },
            LossKind::Nll => LossSpec::Nll { base: &base },
        };
        let lg = loss_and_grad(&flow, &manifold, spec, &batch).map_err(|e| match e {
            Error::NonFiniteLoss { sample, value, .. } => {
                Error::NonFiniteLoss { step, sample, value }
            }
            other => other,
        })?;
        adam.update(&mut flow, &manifold, &lg.grad, config)?;
        trace.push(TraceRow { step, loss: lg.loss, wallclock: start.elapsed().as_secs_f64() });
    }
    let wallclock_per_iter = if config.steps > 0 {
        start.elapsed().as_secs_f64() / config.steps as f64
    } else {
        0.0
    };

    let report = evaluate(
        &flow,
        config.direction(),
        &manifold,
        &base,
        &target,
        config.eval_samples,
        config.seed ^ EVAL_SEED_OFFSET,
        wallclock_per_iter,
    )?;

    let model = TrainedModel {
        flow,
        direction: config.direction(),
        meta: ModelMeta {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
        },
    };
    Ok(TrainOutput { model, report, trace, warnings })
}

/// Held-out evaluation: KL estimate with standard error plus ESS.
///
/// Forward flows push base samples and score them against the target
/// (reverse KL); backward flows score data samples by likelihood (forward
/// KL). In both cases the per-sample log importance weight is the negated
/// KL term, so the ESS comes from the same pass.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    flow: &Flow,
    direction: Direction,
    manifold: &Manifold,
    base: &Density,
    target: &Density,
    n: usize,
    seed: u64,
    wallclock_per_iter: f64,
) -> Result<EvalReport> {
    if n == 0 {
        return Err(Error::InvalidBatch("evaluation needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Vec<ManifoldPoint> = match direction {
        Direction::Forward => base.sample(&mut rng, n),
        Direction::Backward => target.sample(&mut rng, n),
    };
    let views = flow.views(&mut f64::from_f64);
    let terms: Vec<Result<Option<f64>>> = batch
        .par_chunks(256)
        .flat_map_iter(|chunk| {
            chunk.iter().map(|x| match flow_push_logdet(manifold, &views, x.coords()) {
                Ok((pushed, logdet, _)) => Ok(Some(match direction {
                    Direction::Forward => {
                        base.log_density(x) - logdet - target.log_density_s(&pushed)
                    }
                    Direction::Backward => {
                        target.log_density(x) - (base.log_density_s(&pushed) + logdet)
                    }
                })),
                Err(Error::CutLocus { .. }) => Ok(None),
                Err(e) => Err(e),
            })
        })
        .collect();

    let mut kl_terms = Vec::with_capacity(n);
    let mut rejected = 0usize;
    for t in terms {
        match t? {
            Some(v) => kl_terms.push(v),
            None => rejected += 1,
        }
    }
    if kl_terms.is_empty() {
        return Err(Error::InvalidBatch("all evaluation samples hit the cut locus".into()));
    }
    let n_used = kl_terms.len() as f64;
    let mean = kl_terms.iter().sum::<f64>() / n_used;
    let var = kl_terms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n_used.max(2.0);
    let log_w: Vec<f64> = kl_terms.iter().map(|v| -v).collect();
    Ok(EvalReport {
        kl_nats: mean,
        kl_stderr: (var / n_used).sqrt(),
        ess_percent: ess_from_log_weights(&log_w),
        n_eval: kl_terms.len(),
        rejected_cutlocus: rejected,
        wallclock_per_iter,
    })
}

fn init_flow<R: Rng + ?Sized>(config: &TrainConfig, manifold: &Manifold, rng: &mut R) -> Flow {
    let blocks = (0..config.blocks)
        .map(|_| BlockPotential {
            layers: (0..config.layers)
                .map(|_| DiscretePotential {
                    components: manifold
                        .sample_uniform::<f64, _>(rng, config.components)
                        .into_iter()
                        .map(|p| PotentialComponent {
                            y: p.into_coords(),
                            alpha: config.alpha_min + config.alpha_range * rng.random::<f64>(),
                        })
                        .collect(),
                    gamma: config.gamma,
                })
                .collect(),
            // starts near (1 - w) phi with small w; the squash keeps every
            // gradient step inside [0, 1]
            weights_raw: vec![-2.0; config.layers],
            identity_relu: config.gamma2,
        })
        .collect();
    Flow { manifold: manifold.descriptor().clone(), blocks }
}

/// Adam with bias correction. Location gradients are tangent-projected at
/// their component before entering the moments; locations are retracted
/// (per-factor normalization) after each step.
struct AdamState {
    m: ParamGradient,
    v: ParamGradient,
    t: usize,
}

const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    fn zeros(flow: &Flow) -> Self {
        Self { m: ParamGradient::zeros_like(flow), v: ParamGradient::zeros_like(flow), t: 0 }
    }

    fn update(
        &mut self,
        flow: &mut Flow,
        manifold: &Manifold,
        grad: &ParamGradient,
        config: &TrainConfig,
    ) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (config.beta1, config.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let lr = config.learning_rate;

        let step = |theta: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *theta -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        };

        for ((block, gb), (mb, vb)) in flow
            .blocks
            .iter_mut()
            .zip(&grad.blocks)
            .zip(self.m.blocks.iter_mut().zip(&mut self.v.blocks))
        {
            for ((layer, gl), (ml, vl)) in block
                .layers
                .iter_mut()
                .zip(&gb.layers)
                .zip(mb.layers.iter_mut().zip(&mut vb.layers))
            {
                for (ci, comp) in layer.components.iter_mut().enumerate() {
                    // Riemannian gradient: tangent projection of the
                    // ambient gradient at y_i
                    let mut gy = gl.d_y[ci].clone();
                    let yp = ManifoldPoint::new(manifold, comp.y.clone())
                        .map_err(|_| Error::ManifoldMismatch("component left the manifold".into()))?;
                    manifold.tangent_project(&yp, &mut gy);
                    for k in 0..comp.y.len() {
                        step(&mut comp.y[k], &mut ml.d_y[ci][k], &mut vl.d_y[ci][k], gy[k]);
                    }
                    step(
                        &mut comp.alpha,
                        &mut ml.d_alpha[ci],
                        &mut vl.d_alpha[ci],
                        gl.d_alpha[ci],
                    );
                    // retraction
                    let projected = manifold.project(&comp.y)?;
                    comp.y.copy_from_slice(projected.coords());
                }
            }
            for (wi, w) in block.weights_raw.iter_mut().enumerate() {
                step(w, &mut mb.d_weights[wi], &mut vb.d_weights[wi], gb.d_weights[wi]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn small_config() -> TrainConfig {
        TrainConfig {
            manifold: ManifoldDescriptor::sphere(2),
            base: DensitySpec::Uniform,
            target: DensitySpec::SphereMixture4,
            loss: LossKind::ReverseKl,
            blocks: 2,
            layers: 1,
            components: 16,
            gamma: 0.1,
            gamma2: None,
            alpha_min: 0.1,
            alpha_range: 0.5,
            learning_rate: 0.05,
            beta1: 0.9,
            beta2: 0.99,
            batch_size: 32,
            steps: 60,
            seed: 7,
            eval_samples: 4000,
        }
    }

    #[test]
    fn identity_flow_kl_of_itself_is_zero() {
        let m = ManifoldDescriptor::sphere(2).build().unwrap();
        let base = Density::uniform(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut config = small_config();
        config.gamma = 0.0;
        config.gamma2 = Some(0.0);
        let flow = init_flow(&config, &m, &mut rng);
        let batch: Vec<ManifoldPoint> = base.sample(&mut rng, 64);
        let kl = reverse_kl_loss(&flow, &m, &base, &base, &batch).unwrap();
        assert_eq!(kl, 0.0);
    }

    #[test]
    fn identity_flow_nll_of_uniform_is_log_area() {
        let m = ManifoldDescriptor::sphere(2).build().unwrap();
        let base = Density::uniform(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut config = small_config();
        config.gamma = 0.0;
        config.gamma2 = Some(0.0);
        let flow = init_flow(&config, &m, &mut rng);
        let batch: Vec<ManifoldPoint> = base.sample(&mut rng, 32);
        let nll = nll_loss(&flow, &m, &base, &batch).unwrap();
        assert_relative_eq!(nll, (4.0 * PI).ln(), epsilon = 1e-12);
        assert!(matches!(nll_loss(&flow, &m, &base, &[]), Err(Error::InvalidBatch(_))));
    }

    #[test]
    fn identity_flow_ess_against_itself_is_full() {
        let m = ManifoldDescriptor::sphere(2).build().unwrap();
        let base = Density::uniform(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut config = small_config();
        config.gamma = 0.0;
        config.gamma2 = Some(0.0);
        let flow = init_flow(&config, &m, &mut rng);
        let e = ess(&flow, &m, &base, &base, 500, &mut rng).unwrap();
        assert_relative_eq!(e, 100.0, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_weights_give_minimal_ess() {
        // all weight on one sample -> 100/n percent
        let mut log_w = vec![f64::NEG_INFINITY; 10];
        log_w[3] = 0.0;
        assert_relative_eq!(ess_from_log_weights(&log_w), 10.0, epsilon = 1e-9);
    }

    #[test]
    fn short_training_reduces_kl() {
        let config = small_config();
        let out = train(&config).unwrap();
        assert_eq!(out.trace.len(), config.steps);
        // the miniature test config sits below the component sweep range,
        // which warns but trains fine
        assert_eq!(out.warnings.len(), 1);

        // compare final eval KL against the step-0 initialization
        let mut init_cfg = config.clone();
        init_cfg.steps = 0;
        let init = train(&init_cfg).unwrap();
        assert!(
            out.report.kl_nats < init.report.kl_nats,
            "training did not reduce KL: {} -> {}",
            init.report.kl_nats,
            out.report.kl_nats
        );
        assert!(out.report.ess_percent > init.report.ess_percent);
        assert!(out.report.kl_nats >= -3.0 * out.report.kl_stderr);
        assert!(out.report.ess_percent > 0.0 && out.report.ess_percent <= 100.0);
    }

    #[test]
    fn training_is_deterministic_in_the_seed() {
        let mut config = small_config();
        config.steps = 8;
        config.eval_samples = 1000;
        let a = train(&config).unwrap();
        let b = train(&config).unwrap();
        assert_eq!(a.model.to_json().unwrap(), b.model.to_json().unwrap());
        assert_eq!(a.report.kl_nats, b.report.kl_nats);

        config.seed += 1;
        let c = train(&config).unwrap();
        assert_ne!(a.model.to_json().unwrap(), c.model.to_json().unwrap());
    }

    #[test]
    fn model_json_shape_and_round_trip() {
        let mut config = small_config();
        config.steps = 2;
        config.eval_samples = 100;
        let out = train(&config).unwrap();
        let json = out.model.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(v.get("manifold").is_some());
        assert!(v.get("blocks").is_some());
        assert_eq!(v.get("direction").unwrap(), "forward");
        assert!(v.get("meta").is_some());

        let back = TrainedModel::from_json(&json).unwrap();
        assert_eq!(back.to_json().unwrap(), json);
    }

    #[test]
    fn sweep_warnings_fire_outside_ranges() {
        let mut config = small_config();
        config.learning_rate = 0.5;
        config.gamma = 0.2;
        let warnings = config.validate().unwrap();
        assert_eq!(warnings.len(), 3, "{warnings:?}"); // lr, components(16), gamma
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut config = small_config();
        config.blocks = 0;
        assert!(config.validate().is_err());
        let mut config = small_config();
        config.learning_rate = 0.0;
        assert!(config.validate().is_err());
    }
}
