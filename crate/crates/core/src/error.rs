use thiserror::Error;
use vssf_autodiff::AdError;

#[derive(Debug, Error)]
pub enum VssfError {
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("transition matrix is not stable (spectral radius {0})")]
    NotStable(f64),
    #[error("no sensor model named `{0}`")]
    UnknownSensor(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("dataset has no ground-truth states for evaluation: {0}")]
    MissingGroundTruth(String),
    #[error("bad magic bytes: not a VSSF container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("array shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

pub type Result<T> = std::result::Result<T, VssfError>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(VssfError::DimensionMismatch {
            context,
            expected,
            got,
        });
    }
    Ok(())
}
