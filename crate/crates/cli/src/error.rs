use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Config does not match the schema. `pointer` is a JSON pointer.
    #[error("schema error at {pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error("{file}:{line}:{column}: {message}")]
    Parse { file: String, line: u64, column: usize, message: String },
    #[error("negative entry {value} in {file}, cell {cell} (row {row}, column {column})")]
    NegativeEntry { file: String, cell: String, row: usize, column: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
}

impl CliError {
    pub fn schema(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Schema { pointer: pointer.into(), message: message.into() }
    }

    /// 1 for failures while running, 2 for anything wrong with the inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Stage { .. } => 1,
            _ => 2,
        }
    }
}
