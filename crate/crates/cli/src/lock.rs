use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use vocl_core::Error;

pub const LOCK_FILE: &str = ".vocl.lock";

/// Exclusive claim on an output directory, released on drop. A crashed run
/// leaves the file behind; delete it by hand once no run is using the
/// directory.
#[derive(Debug)]
pub struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    pub fn acquire(dir: &Path) -> vocl_core::Result<Self> {
        let io = |path: &Path, source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(|e| io(&path, e))?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Error::Load(format!(
                "{} is in use by another run (lock file {} exists)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(io(&path, e)),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
