use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter failed validation; `field` is the dotted config path.
    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },

    #[error("unstable step at t={time}: max |grad| = {max_gradient:e} exceeds guard")]
    UnstableStep { time: f64, max_gradient: f64 },

    #[error("step size {dt} exceeds the stability bound {bound}")]
    StepTooLarge { dt: f64, bound: f64 },

    #[error(
        "CFL violated: dt_pde * max row sum = {product} > 1 (row sum {row_sum}, node {node:?})"
    )]
    Cfl {
        product: f64,
        row_sum: f64,
        node: Option<usize>,
    },

    #[error("R_V not certified: V'' is not eventually >= 1 within search bound {bound}")]
    GrowthNotCertified { bound: f64 },

    #[error("fewer than 10 effective batches ({batches})")]
    TooFewBatches { batches: usize },

    #[error("insufficient trajectories: {got} < {need}")]
    TooFewTrajectories { got: usize, need: usize },

    #[error("too few tail points: {got} beyond the 99% quantile (need 30)")]
    TooFewTailPoints { got: usize },

    #[error("horizon too short: truncation bound {bound:e} exceeds tolerance {tolerance:e}")]
    HorizonTooShort { bound: f64, tolerance: f64 },

    #[error("time {t} outside trajectory horizon {horizon}")]
    OutsideHorizon { t: f64, horizon: f64 },

    #[error("density is not log-concave at grid index {index}")]
    NotLogConcave { index: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("quadrature failure: {0}")]
    Quadrature(String),

    #[error("delta calibration failed below 2^-60")]
    Calibration,

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }
}
