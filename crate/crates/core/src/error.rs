use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A function was evaluated outside of its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid or inconsistent input data (grids, parameters, collections).
    #[error("invalid input: {0}")]
    Input(String),

    #[error(
        "quadrature did not converge at t = {t}: doubling the node count changed the value by \
         {change:.3e} (relative), tolerance {tolerance:.1e}"
    )]
    Quadrature { t: f64, change: f64, tolerance: f64 },

    #[error(
        "negative power-spectrum estimate {value:.3e} in frequency bin {bin} (omega = {omega:.4}), \
         peak {peak:.3e}"
    )]
    NegativeSpectrum { bin: usize, omega: f64, value: f64, peak: f64 },

    #[error("trajectory of realization {index} diverged at t = {time:.4} (matrix norm {norm:.3e})")]
    Diverged { index: u64, time: f64, norm: f64 },

    #[error(
        "{diverged} of {total} realizations diverged (fraction {fraction:.2e} exceeds limit \
         {limit:.1e}); first diverged index {first_index}"
    )]
    TooManyDiverged { diverged: u64, total: u64, fraction: f64, limit: f64, first_index: u64 },

    #[error("realization {index}: {source}")]
    Realization {
        index: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors raised by the numerics rather than by bad input or I/O.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Quadrature { .. }
            | Error::NegativeSpectrum { .. }
            | Error::Diverged { .. }
            | Error::TooManyDiverged { .. } => true,
            Error::Realization { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
