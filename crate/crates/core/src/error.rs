use alloc::string::String;

/// Errors produced by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not fit the operation.
    #[error("{op}: dimension mismatch on {axes}: {detail}")]
    Shape {
        op: &'static str,
        axes: &'static str,
        detail: String,
    },

    /// A parameter or configuration value is outside its domain.
    #[error("configuration error: {0}")]
    Config(String),

    /// Rejection sampling could not place the requested heads.
    #[error("capacity error: could only place {placed} of {requested} heads after {attempts} rejected draws")]
    Capacity {
        placed: usize,
        requested: usize,
        attempts: usize,
    },

    /// A statistical estimator was handed degenerate samples.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// A metric is undefined for the given input (e.g. an empty list).
    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    /// A loss or gradient became NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, axes: &'static str, detail: String) -> Error {
    Error::Shape { op, axes, detail }
}
