use thiserror::Error;

/// Errors from network construction, prior handling, and the numerical
/// pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("node index {index} out of range ({n_nodes} nodes)")]
    UnknownNode { index: usize, n_nodes: usize },

    #[error("self-loop on node '{label}' is not allowed")]
    SelfLoop { label: String },

    #[error("duplicate uncertain edge '{from}' -> '{to}'")]
    DuplicateUncertainEdge { from: String, to: String },

    #[error("{count} uncertain edges exceed the combinatorial guard of {max} (2^{count} structures)")]
    TooManyUncertainEdges { count: usize, max: usize },

    #[error("edge probability {value} for '{from}' -> '{to}' must lie in (0, 1)")]
    EdgeProbabilityOutOfRange { from: String, to: String, value: f64 },

    #[error("allocation matrix disagrees with structure at '{from}' -> '{to}': {detail}")]
    PatternMismatch { from: String, to: String, detail: String },

    #[error(
        "mass-balance system is singular or near-singular (rcond ~ {rcond:.3e}); \
         allocation-conserving cycle through nodes [{}]", nodes.join(", ")
    )]
    SingularSystem { rcond: f64, nodes: Vec<String> },

    #[error("solved flow at node '{label}' is negative ({value}) beyond tolerance; inputs infeasible")]
    InfeasibleFlow { label: String, value: f64 },

    #[error("allocation prior for node '{label}': {detail}")]
    InvalidAllocationPrior { label: String, detail: String },

    #[error(
        "deriving prior for structure {structure}: node '{label}' keeps outgoing edges \
         but no hyper-parameters survive the deletion rule"
    )]
    EmptyDerivedPrior { structure: usize, label: String },

    #[error("input prior for node '{label}': {detail}")]
    InvalidInputPrior { label: String, detail: String },

    #[error(
        "truncated-normal prior for node '{label}' has acceptance probability {acceptance:.3e} < 1e-6; \
         rejection sampling would not terminate"
    )]
    DegenerateTruncation { label: String, acceptance: f64 },

    #[error("design component {index}: noise level sigma = {sigma} must be positive")]
    InvalidSigma { index: usize, sigma: f64 },

    #[error("observation has {n_values} values but its design has {n_targets} targets")]
    ObservationShape { n_values: usize, n_targets: usize },

    #[error("observation value {value} at position {index} is not finite")]
    NonFiniteObservation { index: usize, value: f64 },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("model prior must be a probability vector: {detail}")]
    InvalidModelPrior { detail: String },

    #[error(
        "every candidate structure has zero evidence; the observations [{}] rule out \
         all structures under the absent-edge convention", observations.join("; ")
    )]
    AllEvidenceDegenerate { observations: Vec<String> },

    #[error("posterior places mass {posterior} on structure {index} whose prior is zero")]
    AbsoluteContinuity { index: usize, posterior: f64 },

    #[error("design enumeration would produce {count} designs, above the cap of {cap}")]
    DesignCapExceeded { count: usize, cap: usize },

    #[error("no designs to rank")]
    EmptyDesignList,

    #[error("batch does not cover design target {detail}")]
    UncoveredTarget { detail: String },

    #[error("sample budget must be at least {min} (got {got})")]
    SampleBudget { min: usize, got: usize },

    #[error("benchmark needs at least 2 trials (got {got})")]
    TooFewTrials { got: usize },

    #[error("structure {structure} (code {code}): {source}")]
    StructureSolve {
        structure: usize,
        code: String,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse classification used by callers that map errors to process exit
/// codes: bad inputs versus numerical failures discovered mid-computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Input,
    Numerical,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::SingularSystem { .. }
            | Error::InfeasibleFlow { .. }
            | Error::AllEvidenceDegenerate { .. }
            | Error::AbsoluteContinuity { .. } => ErrorCategory::Numerical,
            Error::StructureSolve { source, .. } => source.category(),
            _ => ErrorCategory::Input,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
