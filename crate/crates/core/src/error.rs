//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left_rows}x{left_cols} vs {right_rows}x{right_cols} in {context}")]
    ShapeMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
        context: &'static str,
    },

    #[error("invalid range: lo {lo} > hi {hi}")]
    InvalidRange { lo: f64, hi: f64 },

    #[error("reference tensor has zero L1 norm in {context}")]
    ZeroReferenceNorm { context: &'static str },

    #[error("sequence lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("degenerate sequence in {context}: need at least two distinct values")]
    DegenerateSequence { context: &'static str },

    #[error("reference tensor is constant; PSNR undefined for nonzero MSE")]
    DegenerateReference,

    #[error("grid {grid_h}x{grid_w} does not tile {tokens} tokens")]
    BadGrid {
        grid_h: usize,
        grid_w: usize,
        tokens: usize,
    },

    #[error("window {window} must be odd and fit a {grid_h}x{grid_w} grid")]
    BadWindow {
        window: usize,
        grid_h: usize,
        grid_w: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("timestep {t} outside [0, 1]")]
    OutOfRangeTime { t: f64 },

    #[error("probe depth {m} outside [1, {max}]")]
    BadProbeDepth { m: usize, max: usize },

    #[error("step-reduction fraction {fraction} must lie in (0, 1] and keep at least one step")]
    InvalidFraction { fraction: f64 },

    #[error("cache interval must be >= 1")]
    InvalidInterval,

    #[error("recorded layer set invalid: {0}")]
    InvalidLayers(String),

    #[error("recompute schedule invalid: {0}")]
    BadSchedule(String),

    #[error("layer {layer} not recorded in trace")]
    LayerNotRecorded { layer: usize },

    #[error("non-finite value produced in {context}")]
    NonFinite { context: &'static str },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },

    #[error("step {step_index}: {source}")]
    AtStep {
        step_index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn at_step(step_index: usize, source: Error) -> Self {
        Error::AtStep {
            step_index,
            source: Box::new(source),
        }
    }
}
