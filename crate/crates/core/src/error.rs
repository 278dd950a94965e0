use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Parameter layout, input width or label range does not match the model.
    #[error("architecture mismatch: {0}")]
    Architecture(String),

    /// A NaN or infinity appeared while evaluating a layer.
    #[error("non-finite value in layer {layer}: {context}")]
    NonFinite { layer: usize, context: String },

    /// Generic numeric failure outside a layer (MC sample, inner iterate, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("filter {unit} of layer {layer} has zero norm")]
    DegenerateFilter { layer: usize, unit: usize },

    #[error("gradient norm {norm:e} is too small to define a search direction")]
    UndefinedDirection { norm: f64 },

    #[error("cannot bracket target deviation {target} (deviation at lower bound {low:e}, at upper bound {high:e})")]
    NonBracketable { target: f64, low: f64, high: f64 },

    #[error("correlation is undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("cannot normalize a constant array")]
    DegenerateNormalization,

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn arch(msg: impl Into<String>) -> Self {
        Error::Architecture(msg.into())
    }

    /// True for failures caused by numerics rather than by malformed input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::Numeric(_)
                | Error::DegenerateFilter { .. }
                | Error::UndefinedDirection { .. }
                | Error::NonBracketable { .. }
                | Error::UndefinedCorrelation(_)
                | Error::DegenerateNormalization
        )
    }
}
