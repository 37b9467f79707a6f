use thiserror::Error;

/// Errors shared by all modules of the crate.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// A parameter lies outside the box its family declares.
    #[error("parameter domain violation: {0}")]
    ParameterDomain(String),

    /// The null density vanishes somewhere the perturbation (or the data)
    /// puts mass, so likelihood ratios are undefined.
    #[error("support violation: {0}")]
    SupportViolation(String),

    /// A density or gradient could not be evaluated at the requested point.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// A kernel integral diverged or fell outside its feasible range.
    #[error("nonfinite variance: {0}")]
    NonfiniteVariance(String),

    /// Adaptive quadrature hit its depth limit before reaching tolerance.
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    /// The Fisher information matrix is singular (degenerate model).
    #[error("singular information matrix: {0}")]
    SingularInformation(String),

    /// Correlation requested at a point where the kernel diagonal vanishes.
    #[error("singular kernel diagonal: {0}")]
    SingularDiagonal(String),

    /// The numerical order check disagrees with the structural class of a
    /// singularity.
    #[error("singularity classification conflict: {0}")]
    ClassificationConflict(String),

    /// The curvature determinant is negative beyond tolerance.
    #[error("curvature evaluation failed: {0}")]
    Curvature(String),

    /// An operation received a dimension it does not support.
    #[error("unsupported dimension: {0}")]
    UnsupportedDimension(String),

    /// A bracketing solve found no sign change.
    #[error("bracket error: {0}")]
    Bracket(String),

    /// An iterative fit collapsed or lost all responsibility mass.
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    /// No usable grid points remain after exclusions.
    #[error("empty grid: {0}")]
    EmptyGrid(String),

    /// The discretized kernel could not be factorized even after jitter
    /// escalation.
    #[error("ill-conditioned kernel: {0}")]
    IllConditioned(String),

    /// Invalid user input (configuration, data files, argument ranges).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Reading or writing a report or data file failed.
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;
