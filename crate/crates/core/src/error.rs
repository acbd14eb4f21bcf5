use alloc::string::String;

/// Failure modes shared by every stage of the workbench core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("generation error: {0}")]
    Generation(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
