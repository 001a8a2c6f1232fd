use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate denominator in {op}: |{value}| < {eps}")]
    DegenerateDenominator { op: &'static str, value: f64, eps: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Dimension { op, detail: detail.into() })
}

pub(crate) fn contract_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Contract { op, detail: detail.into() })
}
