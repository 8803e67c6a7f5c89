//! Run directories: `config.json`, `log.jsonl`, `checkpoints/`, `outputs/`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{RunConfig, RUN_DIR_ENV};
use crate::error::CliResult;

pub struct RunDir {
    pub root: PathBuf,
    log: BufWriter<File>,
}

/// Output root: `$PEIFG_RUN_DIR` if set, else the config's `output_root`.
pub fn output_root(cfg: &RunConfig) -> PathBuf {
    std::env::var_os(RUN_DIR_ENV).map_or_else(|| cfg.output_root.clone(), PathBuf::from)
}

impl RunDir {
    /// Creates `{root}/{name}-{command}-{n}` with the first unused `n`, or
    /// uses `explicit` when given.
    pub fn create(cfg: &RunConfig, command: &str, explicit: Option<&Path>) -> CliResult<Self> {
        let root = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let base = output_root(cfg);
                (0..)
                    .map(|n| base.join(format!("{}-{command}-{n:03}", cfg.name)))
                    .find(|p| !p.exists())
                    .expect("unbounded range")
            }
        };
        std::fs::create_dir_all(root.join("checkpoints"))?;
        std::fs::create_dir_all(root.join("outputs"))?;
        std::fs::write(root.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
        let log = BufWriter::new(File::create(root.join("log.jsonl"))?);
        Ok(Self { root, log })
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn output(&self, name: &str) -> PathBuf {
        self.root.join("outputs").join(name)
    }

    pub fn log<T: Serialize>(&mut self, record: &T) -> CliResult<()> {
        serde_json::to_writer(&mut self.log, record)?;
        self.log.write_all(b"\n")?;
        Ok(())
    }

    pub fn write_output<T: Serialize>(&self, name: &str, value: &T) -> CliResult<PathBuf> {
        let path = self.output(name);
        std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n")?;
        Ok(path)
    }

    pub fn finish(mut self) -> CliResult<PathBuf> {
        self.log.flush()?;
        Ok(self.root)
    }
}
