use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input: bad dates, wrong lengths, invalid parameters.
    #[error("input error: {0}")]
    Input(String),

    /// A source or panel file does not match its declared layout.
    #[error("format error: {0}")]
    Format(String),

    #[error("innovation covariance is not positive definite at period {period}")]
    SingularInnovation { period: usize },

    #[error("singular normal equations in {block}")]
    SingularNormalEquations { block: String },

    #[error(
        "log-likelihood decreased at iteration {iteration}: {previous} -> {current} \
         (drop {drop:e} exceeds slack)"
    )]
    NonMonotone {
        iteration: usize,
        previous: f64,
        current: f64,
        drop: f64,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerical machinery, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularInnovation { .. }
                | Error::SingularNormalEquations { .. }
                | Error::NonMonotone { .. }
                | Error::Numerical(_)
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Input(_) => "input",
            Error::Format(_) => "format",
            Error::SingularInnovation { .. } => "singular_innovation",
            Error::SingularNormalEquations { .. } => "singular_normal_equations",
            Error::NonMonotone { .. } => "non_monotone",
            Error::Numerical(_) => "numerical",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
