use thiserror::Error;

pub type Result<T, E = RteError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RteError {
    /// A coefficient function produced a non-finite value.
    #[error("model evaluation failed in {what} at x = {x:?}")]
    ModelEvaluation { what: String, x: Vec<f64> },

    /// The model is missing something an operation needs, or its hooks are inconsistent.
    #[error("model error: {0}")]
    Model(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid Poisson path query.
    #[error("poisson query error: {0}")]
    Query(String),

    #[error("grid error: T = {horizon} is not an integer multiple of h = {h}")]
    Grid { horizon: f64, h: f64 },

    #[error("implicit solve did not converge in {iterations} iterations at step {step} (residual {residual:e})")]
    ImplicitSolve {
        step: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("negative component {component} (value {value}) at step {step}")]
    Domain {
        step: usize,
        component: usize,
        value: f64,
    },

    #[error("exact solver exceeded {max_jumps} jumps before reaching T")]
    RunawayJumps { max_jumps: usize },

    #[error("order fit error: {0}")]
    Fit(String),

    #[error("unsupported model: {0}")]
    Unsupported(String),

    /// A Monte Carlo replication failed; identifies the replication and the variant.
    #[error("replication {replication}, variant {variant}: {source}")]
    Replication {
        replication: u64,
        variant: String,
        #[source]
        source: Box<RteError>,
    },
}

impl RteError {
    pub(crate) fn eval(what: impl Into<String>, x: &[f64]) -> Self {
        RteError::ModelEvaluation {
            what: what.into(),
            x: x.to_vec(),
        }
    }

    /// The innermost error, looking through replication wrappers.
    pub fn root(&self) -> &RteError {
        match self {
            RteError::Replication { source, .. } => source.root(),
            other => other,
        }
    }
}
