use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted across the solver toolkit.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("shape mismatch: left {left:?}, right {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("expected a {expected} tensor, got shape {got:?}")]
    RankMismatch { expected: &'static str, got: Vec<usize> },

    #[error("derivative kernel must be 5x5, got {rows}x{cols}")]
    KernelSize { rows: usize, cols: usize },

    #[error("loss must be a real scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("{context}: expected {expected} channels, got {got}")]
    ChannelMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("grid must be square and even, got {h}x{w}")]
    GridShape { h: usize, w: usize },

    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },

    #[error("padding width {width} exceeds grid extent {extent}")]
    PadWidth { width: usize, extent: usize },

    #[error("retained modes {modes} too large for {h}x{w} grid (need 2*modes <= extent)")]
    ModesTooLarge { modes: usize, h: usize, w: usize },

    #[error("non-finite value in RK4 stage {stage}")]
    NonFiniteStage { stage: usize },

    #[error("rollout diverged at step {step}: max |value| = {max_abs:.3e} exceeds {threshold:.1e}")]
    Diverged {
        step: usize,
        max_abs: f64,
        threshold: f64,
    },

    #[error("time step {dt:.3e} fails stability check: limit {limit:.3e} ({kind})")]
    Unstable { dt: f64, limit: f64, kind: &'static str },

    #[error("stride {stride} does not divide extent {extent} ({axis})")]
    StrideMismatch {
        stride: usize,
        extent: usize,
        axis: &'static str,
    },

    #[error("sparsify would leave no window: {requested} of {available} windows dropped")]
    SparsifyTooAggressive { requested: usize, available: usize },

    #[error("{0}")]
    Config(String),

    #[error("unsupported file format: {0}")]
    Format(String),

    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },

    #[error("training failed at epoch {epoch}, step {step}: {source}")]
    Train {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }
}
