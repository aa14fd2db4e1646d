use thiserror::Error;

/// Errors raised by the tensor/autodiff layer.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} does not hold {len} elements")]
    ShapeLen { shape: Vec<usize>, len: usize },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;

impl NumericsError {
    pub fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        NumericsError::Dim {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        NumericsError::NonFinite {
            context: context.into(),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        NumericsError::Contract(msg.into())
    }
}
