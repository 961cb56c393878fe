use thiserror::Error;

/// Errors surfaced by geometry, flows, training, and verification.
#[derive(Debug, Error)]
pub enum Error {
    /// The logarithm map was requested at (or numerically too close to) the
    /// cut locus, where it is undefined. On the sphere this is the antipode.
    #[error("cut locus: points are antipodal within tolerance (inner product {inner})")]
    CutLocus { inner: f64 },

    /// A raw vector could not be projected onto the manifold because a sphere
    /// factor slice has vanishing norm.
    #[error("degenerate input: sphere factor slice {factor} has norm {norm} < 1e-12")]
    DegenerateInput { factor: usize, norm: f64 },

    /// The tangent-basis Jacobian determinant underflowed to zero.
    #[error("singular Jacobian: |det| = {det_abs} at a flow block")]
    SingularJacobian { det_abs: f64 },

    /// A loss evaluation produced NaN or infinity.
    #[error("non-finite loss at step {step}, batch element {sample}: {value}")]
    NonFiniteLoss { step: usize, sample: usize, value: f64 },

    /// An operation received an empty or otherwise unusable batch.
    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    /// Vector length does not match the manifold's ambient dimension.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Inputs live on different manifolds.
    #[error("manifold mismatch: {0}")]
    ManifoldMismatch(String),

    /// A configuration failed validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// The operation is only defined for the other flow direction.
    #[error("invalid direction: {0}")]
    InvalidDirection(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
