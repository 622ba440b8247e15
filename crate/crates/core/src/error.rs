use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("mesh validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("frequency out of range: omega^2 = {omega_sq:.6e} exceeds bound {bound:.6e}")]
    FrequencyRange { omega_sq: f64, bound: f64 },

    #[error("solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    Solver {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("under-resolved mesh: smallest radius {r_min} needs h_max <= {required_h_max:.4e} (mesh has {h_max:.4e})")]
    Resolution {
        r_min: f64,
        h_max: f64,
        required_h_max: f64,
    },

    #[error("inversion stagnated at iteration {iteration}: {reason}")]
    Stagnation { iteration: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerical kernels (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Solver { .. } | Error::Stagnation { .. } | Error::Degenerate(_)
        )
    }
}
