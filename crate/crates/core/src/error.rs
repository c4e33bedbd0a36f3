use thiserror::Error;

/// Errors raised by estimators, fits and I/O in this crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("schema error: column `{0}` not found")]
    Schema(String),

    #[error("parse error at data row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate weights: total weight must be positive")]
    DegenerateWeights,

    #[error("treatment arm {0} has no observations")]
    EmptyArm(u8),

    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("too few observations: need at least {needed}, got {got}")]
    TooFewObservations { needed: usize, got: usize },

    #[error("insufficient tail data: need at least {needed} exceedances, got {got}")]
    InsufficientTailData { needed: usize, got: usize },

    #[error("degenerate tail: all exceedances are equal")]
    DegenerateTail,

    #[error("log-domain error: nonpositive outcome {0} among exceedances")]
    LogDomain(f64),

    #[error("heavy-tail restriction violated: extreme value index {0} is not positive")]
    HeavyTailViolation(f64),

    #[error("degenerate spacing: quantile difference {0} is not positive")]
    DegenerateSpacing(f64),

    #[error("extrapolation bound: integrated signal peaks at {reached} below target {target}; use a finer tail grid")]
    ExtrapolationBound { reached: f64, target: f64 },

    #[error("flat moment: derivative of the estimating equation is zero at {0}")]
    FlatMoment(f64),

    #[error("singular nuisance Jacobian")]
    SingularNuisance,

    #[error("usage error: {0}")]
    Usage(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("campaign failed: all {reps} replicates failed (most common: {modal})")]
    CampaignFailed { reps: usize, modal: String },
}

impl Error {
    /// Short stable tag, used for failure tallies and JSON error objects.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Schema(_) => "schema",
            Error::Parse { .. } => "parse",
            Error::EmptyInput(_) => "empty_input",
            Error::Io(_) => "io",
            Error::Domain(_) => "domain",
            Error::DegenerateWeights => "degenerate_weights",
            Error::EmptyArm(_) => "empty_arm",
            Error::SingularDesign(_) => "singular_design",
            Error::TooFewObservations { .. } => "too_few_observations",
            Error::InsufficientTailData { .. } => "insufficient_tail_data",
            Error::DegenerateTail => "degenerate_tail",
            Error::LogDomain(_) => "log_domain",
            Error::HeavyTailViolation(_) => "heavy_tail_violation",
            Error::DegenerateSpacing(_) => "degenerate_spacing",
            Error::ExtrapolationBound { .. } => "extrapolation_bound",
            Error::FlatMoment(_) => "flat_moment",
            Error::SingularNuisance => "singular_nuisance",
            Error::Usage(_) => "usage",
            Error::InsufficientData(_) => "insufficient_data",
            Error::CampaignFailed { .. } => "campaign_failed",
        }
    }

    /// True for errors caused by the caller's input rather than by estimation.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Schema(_)
                | Error::Parse { .. }
                | Error::EmptyInput(_)
                | Error::Io(_)
                | Error::Usage(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
