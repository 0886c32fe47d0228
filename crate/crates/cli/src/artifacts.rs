//! Artifact writing. Every JSON document carries the resolved config, the
//! seed, and the config hash; all artifact bytes are a pure function of the
//! config, so reruns with the same document are byte-identical regardless of
//! worker count. Wall-clock timestamps go only to the run.log sidecar, which
//! is exactly why that file is not part of the artifact set.

use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use pathindep::error::Result;
use serde_json::{json, Value};

pub struct Artifacts {
    dir: PathBuf,
    /// Deterministic artifacts written so far, for the closing summary line.
    pub written: Vec<PathBuf>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    /// Pretty-printed JSON with sorted keys and a trailing newline.
    pub fn write_json(&mut self, name: &str, value: &Value) -> Result<PathBuf> {
        let path = self.dir.join(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        self.written.push(path.clone());
        Ok(path)
    }

    /// Renders CSV into a buffer first so a failed writer never leaves a
    /// truncated file behind.
    pub fn write_csv<F>(&mut self, name: &str, render: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    {
        let mut buf = Vec::new();
        render(&mut buf)?;
        let path = self.dir.join(name);
        std::fs::write(&path, buf)?;
        self.written.push(path.clone());
        Ok(path)
    }

    /// Appends to the run.log sidecar. Best effort: logging must never turn a
    /// finished run into a failure.
    pub fn log(&self, command: &str, status: &str, elapsed: Duration) {
        let unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        let line = format!(
            "unix_time={unix:.3} command={command} status={status} elapsed_ms={:.1}\n",
            elapsed.as_secs_f64() * 1e3
        );
        let path = self.dir.join("run.log");
        let _ = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .and_then(|mut f| std::io::Write::write_all(&mut f, line.as_bytes()));
    }
}

/// The envelope shared by every JSON artifact.
pub fn wrap(echo: &Value, seed: u64, hash: &str, body: Value) -> Value {
    json!({
        "resolved_config": echo,
        "seed": seed,
        "config_hash": hash,
        "result": body,
    })
}
