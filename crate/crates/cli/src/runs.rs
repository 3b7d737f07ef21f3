//! Run-directory management: creation, config snapshot, and a lock file
//! guarding against concurrent writers.

use std::path::{Path, PathBuf};

use crate::CliError;

#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    /// Create `<dir>/.lock` exclusively; an existing lock means another
    /// process owns the directory.
    pub fn acquire(dir: &Path) -> Result<RunLock, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Runtime(format!(
                "run directory {} is locked by another process (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::Runtime(format!("cannot lock {}: {e}", dir.display()))),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub fn write_snapshot(dir: &Path, snapshot: &str) -> Result<(), CliError> {
    std::fs::write(dir.join("config.toml"), snapshot)
        .map_err(|e| CliError::Runtime(format!("cannot write config snapshot: {e}")))
}
