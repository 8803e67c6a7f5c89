//! Append-only JSON-lines journal. Each line is flushed and synced before
//! the caller sees success; compaction rewrites through a temp file and an
//! atomic rename.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use peifg_core::datagen::{FilterDecision, FilterOutcome};
use peifg_core::sample::Sample;
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Entry {
    Item { sample: Sample },
    Decision { item_id: String, decision: FilterDecision, outcome: FilterOutcome },
}

#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    /// Opens (creating if needed) and returns the entries already present.
    pub fn open(path: &Path) -> ServiceResult<(Self, Vec<Entry>)> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let entries = if path.exists() { read_entries(path)? } else { Vec::new() };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((Self { path: path.to_path_buf(), file }, entries))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, entry: &Entry) -> ServiceResult<()> {
        let mut line = serde_json::to_string(entry)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        Ok(())
    }

    /// Replaces the journal with exactly `entries`.
    pub fn compact(&mut self, entries: &[Entry]) -> ServiceResult<()> {
        let tmp = self.path.with_extension("jsonl.tmp");
        {
            let mut f = File::create(&tmp)?;
            for e in entries {
                writeln!(f, "{}", serde_json::to_string(e)?)?;
            }
            f.sync_all()?;
        }
        std::fs::rename(&tmp, &self.path)?;
        self.file = OpenOptions::new().append(true).open(&self.path)?;
        Ok(())
    }
}

fn read_entries(path: &Path) -> ServiceResult<Vec<Entry>> {
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(e) => out.push(e),
            // A torn final line from a crash mid-write is dropped.
            Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => break,
            Err(e) => return Err(ServiceError::Journal { line: i + 1, message: e.to_string() }),
        }
    }
    Ok(out)
}
