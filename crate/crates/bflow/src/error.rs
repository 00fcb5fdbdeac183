use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("form degree ({p},{q}) out of range for dimension n={n}")]
    DegreeOutOfRange { p: usize, q: usize, n: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unsupported degree p={p} (supported: {supported})")]
    UnsupportedDegree { p: usize, supported: &'static str },

    #[error("dimension n={n} too small, requires n >= {required}")]
    UnsupportedDimension { n: usize, required: usize },

    #[error("matrix not Hermitian (max asymmetry {0:.3e})")]
    NotHermitian(f64),

    #[error("matrix not positive definite (min eigenvalue {min_eig:.3e})")]
    NotPositive { min_eig: f64 },

    #[error("positivity lost at grid point {point} (min eigenvalue {margin:.3e})")]
    PositivityLoss { point: usize, margin: f64 },

    #[error("flow breakdown at t={t}: {detail}")]
    FlowBreakdown { t: f64, detail: String },

    #[error("Newton solver stagnated, residual history: {history:?}")]
    OracleStagnation { history: Vec<f64> },

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("snapshot format error: {0}")]
    Snapshot(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
