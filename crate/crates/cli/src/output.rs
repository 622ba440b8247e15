//! Atomic, self-describing output files.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub struct OutputDir {
    pub dir: PathBuf,
    command: String,
    config_hash: String,
    config: Value,
}

impl OutputDir {
    pub fn new(dir: &Path, command: &str, cfg: &ExperimentConfig) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.into(),
            config_hash: cfg.hash(),
            config: serde_json::to_value(cfg).expect("config serializes"),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// `{tool, version, command, config_hash, config, result}`.
    pub fn write_json(&self, name: &str, result: &impl Serialize) -> std::io::Result<PathBuf> {
        let doc = json!({
            "tool": "elastodyn",
            "version": VERSION,
            "command": self.command,
            "config_hash": self.config_hash,
            "config": self.config,
            "result": result,
        });
        let mut text = serde_json::to_string_pretty(&doc).map_err(std::io::Error::other)?;
        text.push('\n');
        self.write_raw(name, text.as_bytes())
    }

    /// CSV preceded by a `#` provenance line.
    pub fn write_csv(&self, name: &str, body: &str) -> std::io::Result<PathBuf> {
        let text = format!("# elastodyn {VERSION} command={} config_hash={}\n{body}", self.command, self.config_hash);
        self.write_raw(name, text.as_bytes())
    }

    pub fn write_raw(&self, name: &str, bytes: &[u8]) -> std::io::Result<PathBuf> {
        let target = self.path(name);
        write_atomic(&target, bytes)?;
        Ok(target)
    }
}

/// Write to a temporary file in the target directory, then rename over it.
pub fn write_atomic(target: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(target).map_err(|e| e.error)?;
    Ok(())
}
