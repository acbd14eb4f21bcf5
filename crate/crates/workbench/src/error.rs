use std::path::{Path, PathBuf};

/// Failures of the std-side workbench, each mapped to a CLI exit code.
#[derive(Debug, thiserror::Error)]
pub enum WorkbenchError {
    #[error("{0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] gradia_core::Error),
}

pub type Result<T, E = WorkbenchError> = std::result::Result<T, E>;

impl WorkbenchError {
    /// 2 for config or user errors, 3 for a missing prerequisite, 4 for
    /// anything that failed while running.
    pub fn exit_code(&self) -> i32 {
        use gradia_core::Error as E;
        match self {
            WorkbenchError::Config(_) => 2,
            WorkbenchError::Missing(_) => 3,
            WorkbenchError::Core(E::Config(_) | E::Input(_)) => 2,
            WorkbenchError::Runtime(_) | WorkbenchError::Io { .. } | WorkbenchError::Core(_) => 4,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        WorkbenchError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Reads a file, reporting an absent file as a missing prerequisite.
pub fn read_required(path: &Path, what: &str) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => WorkbenchError::Missing(format!("{what} ({})", path.display())),
        _ => WorkbenchError::io(path, e),
    })
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| WorkbenchError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| WorkbenchError::io(path, e))
}
