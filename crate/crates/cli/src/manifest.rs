//! Run manifests: every command appends one JSON line to `manifest.jsonl`
//! in its output directory, recording the fully resolved configuration, the
//! derived seeds, and the file paths involved. Reruns append rather than
//! overwrite, so a directory keeps its full history.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved settings after defaults, config file, and flags.
    pub config: serde_json::Value,
    /// Root seed plus every derived stream seed.
    pub seeds: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub code_version: String,
    pub duration_secs: f64,
    pub unix_time_secs: u64,
}

/// Wall-clock scope for one command; `finish` appends the manifest line.
pub struct RunClock {
    started: Instant,
}

impl RunClock {
    pub fn start() -> Self {
        RunClock {
            started: Instant::now(),
        }
    }

    pub fn finish(
        self,
        dir: &Path,
        command: &str,
        config: serde_json::Value,
        seeds: serde_json::Value,
        inputs: &[&Path],
        outputs: &[&Path],
    ) -> std::io::Result<()> {
        let manifest = RunManifest {
            command: command.to_string(),
            config,
            seeds,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            duration_secs: self.started.elapsed().as_secs_f64(),
            unix_time_secs: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let line = serde_json::to_string(&manifest).map_err(std::io::Error::other)?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(MANIFEST_FILE))?;
        writeln!(f, "{line}")?;
        Ok(())
    }
}
