use thiserror::Error;

/// Errors raised by the pruning toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A numeric input outside the function's domain (NaN, infinity).
    #[error("domain error: {0}")]
    Domain(String),

    /// Shapes, lengths or graph wiring that do not line up.
    #[error("configuration error: {0}")]
    Config(String),

    /// Inputs whose norms vanish where a ratio is required.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Extracted and masked models disagree beyond tolerance.
    #[error(
        "certification failed: max deviation {max_deviation:.3e} > tol {tol:.3e} (worst trial {worst_trial})"
    )]
    Certification {
        max_deviation: f64,
        tol: f64,
        worst_trial: usize,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
