use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument lies outside the domain of a function.
    #[error("domain error in {function}: {detail}")]
    Domain {
        function: &'static str,
        detail: String,
    },

    /// A natural parameter fell outside the family's parameter space.
    #[error("natural parameter {theta} outside ({lower}, {upper}){}", row_suffix(*.row))]
    ThetaOutOfDomain {
        row: Option<usize>,
        theta: f64,
        lower: f64,
        upper: f64,
    },

    /// Cholesky factorization met a non-positive pivot.
    #[error("matrix is not positive definite (pivot {pivot}); {context}")]
    Singular { pivot: usize, context: String },

    #[error("non-finite value encountered at {location}")]
    NonFinite { location: String },

    /// No interior optimum inside the search interval.
    #[error("maximum lies on the boundary of [{lo}, {hi}]; expand the bracket")]
    Bracket { lo: f64, hi: f64 },

    #[error("degenerate direction: {0}")]
    DegenerateDirection(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("selection failed: {0}")]
    Selection(String),
}

fn row_suffix(row: Option<usize>) -> String {
    match row {
        Some(r) => format!(" at row {r}"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(function: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            function,
            detail: detail.into(),
        }
    }

    pub(crate) fn with_row(self, row: usize) -> Self {
        match self {
            Error::ThetaOutOfDomain {
                theta,
                lower,
                upper,
                ..
            } => Error::ThetaOutOfDomain {
                row: Some(row),
                theta,
                lower,
                upper,
            },
            other => other,
        }
    }
}
