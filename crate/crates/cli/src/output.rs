//! Atomic artifact writes and UWB file input.

use std::fs;
use std::io::Write;
use std::path::Path;

use tempfile::NamedTempFile;
use uwbnav::replay::{export_dataset, load_uwb, ColumnMap, Dataset};
use uwbnav::tdoa::{AnchorSet, TdoaFrame};

use crate::CliError;

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = NamedTempFile::new_in(dir).map_err(|e| io_error(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_error(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_error(path, e))?;
    tmp.persist(path).map_err(|e| io_error(path, e.error))?;
    Ok(())
}

/// Exports a dataset into a scratch directory inside `dir`, then moves
/// each file into place.
pub fn export_atomic(dataset: &Dataset, anchors: &AnchorSet, dir: &Path) -> Result<(), CliError> {
    let scratch = tempfile::tempdir_in(dir).map_err(|e| io_error(dir, e))?;
    export_dataset(dataset, anchors, scratch.path()).map_err(|e| CliError::Runtime(e.to_string()))?;
    for entry in fs::read_dir(scratch.path()).map_err(|e| io_error(scratch.path(), e))? {
        let entry = entry.map_err(|e| io_error(scratch.path(), e))?;
        let target = dir.join(entry.file_name());
        fs::rename(entry.path(), &target).map_err(|e| io_error(&target, e))?;
    }
    Ok(())
}

/// Frames from a UWB CSV, with skipped rows reported on stderr.
pub fn read_uwb(path: &Path, map: &ColumnMap) -> Result<Vec<TdoaFrame>, CliError> {
    let (frames, report) = load_uwb(path, map)?;
    for m in &report.malformed {
        eprintln!("warning: {}:{}: skipped row ({})", m.file, m.line, m.reason);
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.json");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"second");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn missing_parent_is_runtime_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_atomic(&dir.path().join("absent/x.csv"), b"x").unwrap_err();
        assert!(matches!(err, CliError::Runtime(_)));
    }
}
