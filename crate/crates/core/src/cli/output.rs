//! Staged output directories and NDJSON files.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

/// Collects a command's files in a sibling directory and moves them into
/// place only when the command succeeds.
pub struct Staging {
    tmp: PathBuf,
    dest: PathBuf,
    committed: bool,
}

impl Staging {
    pub fn new(dest: &Path) -> io::Result<Staging> {
        let name = dest.file_name().map_or_else(|| "out".into(), |n| n.to_string_lossy().into_owned());
        let parent = match dest.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent)?;
        let tmp = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        Ok(Staging { tmp, dest: dest.to_path_buf(), committed: false })
    }

    pub fn dir(&self) -> &Path {
        &self.tmp
    }

    /// Renames the staging directory to the destination, or moves each
    /// entry over the existing destination's entries of the same name.
    pub fn commit(mut self) -> io::Result<()> {
        if !self.dest.exists() {
            fs::rename(&self.tmp, &self.dest)?;
        } else {
            for entry in fs::read_dir(&self.tmp)? {
                let entry = entry?;
                let target = self.dest.join(entry.file_name());
                if target.is_dir() {
                    fs::remove_dir_all(&target)?;
                }
                fs::rename(entry.path(), &target)?;
            }
            fs::remove_dir(&self.tmp)?;
        }
        self.committed = true;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

pub fn ndjson_line<T: Serialize>(record: &T) -> serde_json::Result<String> {
    serde_json::to_string(record)
}

/// Appends records, one JSON document per line, flushing after each.
pub struct NdjsonWriter {
    file: io::BufWriter<fs::File>,
}

impl NdjsonWriter {
    pub fn create(path: &Path) -> io::Result<NdjsonWriter> {
        Ok(NdjsonWriter { file: io::BufWriter::new(fs::File::create(path)?) })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> io::Result<()> {
        let line = ndjson_line(record).map_err(io::Error::other)?;
        writeln!(self.file, "{line}")?;
        self.file.flush()
    }
}
