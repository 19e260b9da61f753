pub mod eval;
pub mod generate;
pub mod prepare;
pub mod serve;
pub mod train;

use std::path::Path;

use isggen_core::trainer::{load_checkpoint, Checkpoint};

use crate::error::{CliError, CliResult, Context, ExitKind};

pub fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    load_checkpoint(path).context(ExitKind::Data, || format!("checkpoint {}", path.display()))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let bytes = serde_json::to_vec_pretty(value).expect("output documents serialize");
    std::fs::write(path, bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}
