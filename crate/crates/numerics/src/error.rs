use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("backward requires a scalar loss, got shape {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("backward already ran on this graph")]
    AlreadyBackpropagated,
    #[error("parameter `{0}` already holds a gradient; call zero_grad first")]
    GradientNotReset(String),
    #[error("log of non-positive value {0}")]
    Domain(f64),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(NumericsError::Dimension {
        op,
        detail: detail.into(),
    })
}
