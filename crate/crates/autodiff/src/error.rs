use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("shape mismatch in `{op}`: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("backward root must be 1x1, got {0:?}")]
    NotScalarRoot((usize, usize)),
    #[error("tape was already consumed by a backward pass; call `reset` first")]
    AlreadyConsumed,
}

pub type Result<T> = std::result::Result<T, AdError>;
