//! Run directories: config snapshot, metrics JSON lines, checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates `cfg.out` and stores the resolved config in it. An existing
    /// snapshot must match exactly, so a run is never continued under a
    /// different config.
    pub fn open(cfg: &RunConfig) -> Result<Self, CliError> {
        cfg.require("out", &cfg.out)?;
        let root = PathBuf::from(&cfg.out);
        fs::create_dir_all(&root).map_err(|e| CliError::io(&root, e))?;
        let dir = Self { root };
        let snap = dir.path(CONFIG_FILE);
        let text = cfg.render();
        if snap.exists() {
            let old = fs::read_to_string(&snap).map_err(|e| CliError::io(&snap, e))?;
            if old != text && RunConfig::parse(&old)?.stage_and_resume_compatible(cfg) {
                dir.write(CONFIG_FILE, text.as_bytes())?;
            } else if old != text {
                return Err(CliError::Config(format!(
                    "{} holds a run with a different config",
                    dir.root.display()
                )));
            }
        } else {
            dir.write(CONFIG_FILE, text.as_bytes())?;
        }
        Ok(dir)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes through a temporary file and a rename.
    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(&self.path(name), bytes)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    pub fn subdir(&self, name: &str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        fs::create_dir_all(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    /// Metrics log; `fresh` truncates it.
    pub fn metrics(&self, fresh: bool) -> Result<Metrics, CliError> {
        let p = self.path(METRICS_FILE);
        let file = if fresh {
            File::create(&p)
        } else {
            OpenOptions::new().create(true).append(true).open(&p)
        }
        .map_err(|e| CliError::io(&p, e))?;
        Ok(Metrics { file, path: p })
    }

    /// Drops metric lines past `step` (a resumed run rewrites them) and
    /// opens the log for appending.
    pub fn truncate_metrics(&self, step: u64) -> Result<Metrics, CliError> {
        let p = self.path(METRICS_FILE);
        let text = fs::read_to_string(&p).unwrap_or_default();
        let kept: String = text
            .lines()
            .filter(|l| {
                serde_json::from_str::<serde_json::Value>(l)
                    .ok()
                    .and_then(|v| v["step"].as_u64())
                    .is_some_and(|s| s <= step)
            })
            .map(|l| format!("{l}\n"))
            .collect();
        self.write(METRICS_FILE, kept.as_bytes())?;
        self.metrics(false)
    }
}

impl RunConfig {
    /// Only `steps` may change between invocations on one run directory.
    fn stage_and_resume_compatible(&self, other: &RunConfig) -> bool {
        let mut a = self.clone();
        a.steps = other.steps;
        a == *other
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub struct Metrics {
    file: File,
    path: PathBuf,
}

impl Metrics {
    pub fn log<T: Serialize>(&mut self, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string(value)?;
        s.push('\n');
        self.file.write_all(s.as_bytes()).map_err(|e| CliError::io(&self.path, e))
    }
}
