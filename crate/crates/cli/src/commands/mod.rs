pub mod evaluate;
pub mod gen_data;
pub mod repro_trend;
pub mod train;
pub mod translate;

use std::path::Path;

use crate::error::CliError;

pub(crate) fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

pub(crate) fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
