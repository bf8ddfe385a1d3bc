use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: width and height must be positive, got {width} x {height}")]
    InvalidDomain { width: f64, height: f64 },

    #[error("domain size {size} is not an integer multiple of resolution h = {h}")]
    IncommensurableDomain { size: f64, h: f64 },

    #[error("resolutions {ha} and {hb} are not commensurable")]
    IncommensurableResolutions { ha: f64, hb: f64 },

    #[error("grid functions live on different physical domains")]
    DomainMismatch,

    #[error("grid spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("non-finite value at channel {channel}, cell ({row}, {col})")]
    NonFiniteValue { channel: usize, row: usize, col: usize },

    #[error("kernel ({kn} x {km}) larger than input ({rows} x {cols})")]
    KernelTooLarge { kn: usize, km: usize, rows: usize, cols: usize },

    #[error("resolution mismatch between input (h = {hu}) and kernel (h = {hw})")]
    ResolutionMismatch { hu: f64, hw: f64 },

    #[error("negative padding is not allowed")]
    NegativePad,

    #[error("size {size} along {axis} axis not divisible by factor {factor}")]
    Indivisible { axis: &'static str, size: usize, factor: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("layer {layer}: {msg}")]
    LayerConfig { layer: usize, msg: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("non-finite parameter update at step {step}")]
    NonFiniteUpdate { step: usize },

    #[error("cut row {row} out of range (rows = {rows})")]
    CutRowOutOfRange { row: usize, rows: usize },

    #[error("modulus radius {radius} exceeds the search window of {max_cells} cells (h = {h})")]
    RadiusTooLarge { radius: f64, max_cells: usize, h: f64 },

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("target is not one-hot at cell ({row}, {col})")]
    InvalidOneHot { row: usize, col: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
