use std::fmt;
use std::path::{Path, PathBuf};

/// Why a run stopped. Bad flags or inputs exit with 1, failures inside a
/// pipeline stage with 2.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Stage { stage: &'static str, path: Option<PathBuf>, message: String },
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Stage { .. } => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "error: {m}"),
            Failure::Stage { stage, path: Some(p), message } => {
                write!(f, "error: stage `{stage}` failed on {}: {message}", p.display())
            }
            Failure::Stage { stage, path: None, message } => write!(f, "error: stage `{stage}` failed: {message}"),
        }
    }
}

impl std::error::Error for Failure {}

pub trait StageExt<T> {
    fn stage(self, stage: &'static str, path: Option<&Path>) -> Result<T, Failure>;
    fn usage(self) -> Result<T, Failure>;
}

impl<T, E: fmt::Display> StageExt<T> for Result<T, E> {
    fn stage(self, stage: &'static str, path: Option<&Path>) -> Result<T, Failure> {
        self.map_err(|e| Failure::Stage { stage, path: path.map(Path::to_path_buf), message: e.to_string() })
    }

    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.to_string()))
    }
}
