use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer}: expected {expected:?}, got {got:?}")]
    LayerShape {
        layer: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward called without a recorded forward pass")]
    NoForward,
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: usize },
    #[error("training diverged: loss is {0}")]
    Diverged(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model has no prunable weights")]
    NoPrunableWeights,
    #[error("nothing to quantize: every gated-on weight is zero")]
    NothingToQuantize,
    #[error("requested fraction {requested} is below the already-quantized fraction {current}")]
    ScheduleRegression { requested: f64, current: f64 },
    #[error("layer {layer}, index {index}: weight {value} is not a power of two")]
    NotPowerOfTwo {
        layer: usize,
        index: usize,
        value: f64,
    },
    #[error("layer {layer} is not fully quantized")]
    NotQuantized { layer: usize },
    #[error("exponent overflow while scaling {value} by 2^{exponent}")]
    ExponentOverflow { value: f64, exponent: i32 },
    #[error("exponent underflow while scaling {value} by 2^{exponent}")]
    ExponentUnderflow { value: f64, exponent: i32 },
    #[error("empty input")]
    Empty,
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
