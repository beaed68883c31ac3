use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid label value {0} (expected 0, 1 or 2)")]
    InvalidLabel(u8),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at iteration {iteration}: {what} is not finite")]
    TrainingDiverged { iteration: u64, what: String },
    #[error("model is not ready: {0}")]
    NotReady(String),
    #[error("cannot aggregate an empty report")]
    EmptyReport,
}

#[macro_export]
#[doc(hidden)]
macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}
