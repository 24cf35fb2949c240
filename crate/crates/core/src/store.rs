//! File primitives behind the project directory: append-only line-delimited
//! JSON logs, atomic whole-file replacement and the single-writer lock.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Serializes `record` as one JSON line and appends it with a single write.
pub fn append_line<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    append_lines(path, std::slice::from_ref(record))
}

/// Appends several records with one write call so a crash leaves either
/// none or a prefix ending in at most one torn line.
pub fn append_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if records.is_empty() {
        return Ok(());
    }
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))
}

/// Reads every complete line of a log. A final line without a trailing
/// newline is a torn write and is skipped. A missing file reads as empty.
pub fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    parse_complete_lines(&text, &path.display().to_string())
}

pub fn parse_complete_lines<T: DeserializeOwned>(text: &str, source: &str) -> Result<Vec<T>> {
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    if complete.len() < text.len() {
        log::warn!("{source}: ignoring torn final line");
    }
    complete
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Replaces `path` with `bytes` via a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Exclusive project lock held for the guard's lifetime.
#[derive(Debug)]
pub struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    /// Creates the lock file, failing with [`Error::Locked`] if it exists.
    pub fn acquire(path: &Path, holder: &str) -> Result<LockGuard> {
        match OpenOptions::new().write(true).create_new(true).open(path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{} {holder}", std::process::id());
                Ok(LockGuard { path: path.to_path_buf() })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(path).unwrap_or_default();
                Err(Error::Locked(format!(
                    "{} is held by {:?}; remove it if no process owns it",
                    path.display(),
                    holder.trim()
                )))
            }
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn is_locked(path: &Path) -> bool {
        path.exists()
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Rec {
        n: u32,
    }

    #[test]
    fn append_and_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        assert!(read_lines::<Rec>(&p).unwrap().is_empty());
        append_line(&p, &Rec { n: 1 }).unwrap();
        append_lines(&p, &[Rec { n: 2 }, Rec { n: 3 }]).unwrap();
        let got: Vec<Rec> = read_lines(&p).unwrap();
        assert_eq!(got.iter().map(|r| r.n).collect::<Vec<_>>(), [1, 2, 3]);
    }

    #[test]
    fn torn_line_is_invisible() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        fs::write(&p, "{\"n\":1}\n{\"n\":").unwrap();
        let got: Vec<Rec> = read_lines(&p).unwrap();
        assert_eq!(got, [Rec { n: 1 }]);
        fs::write(&p, "{\"n\":1}\nnot json\n").unwrap();
        assert!(matches!(read_lines::<Rec>(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(".lock");
        let g = LockGuard::acquire(&p, "loop").unwrap();
        assert!(matches!(LockGuard::acquire(&p, "other"), Err(Error::Locked(_))));
        drop(g);
        assert!(!LockGuard::is_locked(&p));
        LockGuard::acquire(&p, "again").unwrap();
    }

    #[test]
    fn atomic_replace() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        write_json_atomic(&p, &Rec { n: 4 }).unwrap();
        write_json_atomic(&p, &Rec { n: 5 }).unwrap();
        assert_eq!(read_json::<Rec>(&p).unwrap(), Rec { n: 5 });
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
