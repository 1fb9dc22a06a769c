//! Every file the library reads goes through [`open`], which can record the
//! canonical path of each opened file. Tests use this to prove that the
//! training commands never touch the evaluation labels.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::error::{Error, Result};

static RECORDERS: Mutex<Vec<(u64, Vec<PathBuf>)>> = Mutex::new(Vec::new());
static NEXT_ID: Mutex<u64> = Mutex::new(0);

/// Records every path opened (by any thread) while alive.
pub struct AccessRecorder {
    id: u64,
}

impl AccessRecorder {
    pub fn start() -> Self {
        let id = {
            let mut next = NEXT_ID.lock().expect("audit lock");
            *next += 1;
            *next
        };
        RECORDERS.lock().expect("audit lock").push((id, Vec::new()));
        AccessRecorder { id }
    }

    pub fn paths(&self) -> Vec<PathBuf> {
        RECORDERS
            .lock()
            .expect("audit lock")
            .iter()
            .find(|(id, _)| *id == self.id)
            .map(|(_, p)| p.clone())
            .unwrap_or_default()
    }

    /// Whether `path` (compared after canonicalization where possible) was opened.
    pub fn opened(&self, path: &Path) -> bool {
        let target = canonical(path);
        self.paths().contains(&target)
    }
}

impl Drop for AccessRecorder {
    fn drop(&mut self) {
        if let Ok(mut r) = RECORDERS.lock() {
            r.retain(|(id, _)| *id != self.id);
        }
    }
}

fn canonical(path: &Path) -> PathBuf {
    path.canonicalize().unwrap_or_else(|_| {
        // a missing file still gets an absolute, comparable path
        match (path.parent(), path.file_name()) {
            (Some(dir), Some(name)) if !dir.as_os_str().is_empty() => dir
                .canonicalize()
                .map(|d| d.join(name))
                .unwrap_or_else(|_| path.to_path_buf()),
            _ => std::env::current_dir()
                .map(|d| d.join(path))
                .unwrap_or_else(|_| path.to_path_buf()),
        }
    })
}

fn record(path: &Path) {
    let mut recorders = RECORDERS.lock().expect("audit lock");
    if recorders.is_empty() {
        return;
    }
    let p = canonical(path);
    for (_, paths) in recorders.iter_mut() {
        paths.push(p.clone());
    }
}

/// Opens `path` for reading, recording the attempt even if it fails.
pub fn open(path: &Path) -> Result<File> {
    record(path);
    File::open(path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    open(path)?
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub fn read_string(path: &Path) -> Result<String> {
    let mut s = String::new();
    open(path)?
        .read_to_string(&mut s)
        .map_err(|e| Error::io(path, e))?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_opens_including_failed_ones() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        std::fs::write(&a, "x").unwrap();
        let rec = AccessRecorder::start();
        assert_eq!(read_string(&a).unwrap(), "x");
        assert!(read_string(&dir.path().join("missing")).is_err());
        assert!(rec.opened(&a));
        assert!(rec.opened(&dir.path().join("missing")));
        assert!(!rec.opened(&dir.path().join("other")));
    }
}
