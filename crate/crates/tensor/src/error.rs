use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced or consumed by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn shapes(op: &'static str, shapes: &[&[usize]]) -> Self {
        let rendered: Vec<String> = shapes.iter().map(|s| format!("{s:?}")).collect();
        TensorError::Dimension { op, detail: format!("incompatible shapes {}", rendered.join(" vs ")) }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;
