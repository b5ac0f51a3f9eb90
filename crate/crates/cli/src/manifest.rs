//! Run manifests: a JSON record of what a command did, written as
//! `manifest.json` into every directory that received outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rpkit::{Error, Result};
use serde::Serialize;

/// One command invocation: the resolved flags, the files it read and
/// wrote, and how long it took.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub args: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_s: f64,
}

impl RunManifest {
    pub fn new<A: Serialize>(command: &'static str, args: &A, seed: Option<u64>) -> Result<Self> {
        let args = serde_json::to_value(args)
            .map_err(|e| Error::Format(format!("cannot record arguments: {e}")))?;
        Ok(RunManifest {
            tool: "rpkit",
            version: env!("CARGO_PKG_VERSION"),
            command,
            args,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_clock_s: 0.0,
        })
    }

    pub fn input(mut self, path: &Path) -> Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    /// Stamps the elapsed time and writes `manifest.json` into each listed
    /// directory, deduplicated, creating directories as needed.
    pub fn write(mut self, started: Instant, dirs: &[&Path]) -> Result<()> {
        self.wall_clock_s = started.elapsed().as_secs_f64();
        let mut seen: Vec<&Path> = Vec::new();
        for dir in dirs {
            if seen.contains(dir) {
                continue;
            }
            seen.push(dir);
            std::fs::create_dir_all(dir).map_err(|e| Error::io(*dir, e))?;
            let path = dir.join("manifest.json");
            let text = serde_json::to_string_pretty(&self)
                .map_err(|e| Error::Format(format!("cannot encode manifest: {e}")))?;
            std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// The directory a file output lands in, for manifest placement.
pub fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if p.as_os_str().is_empty() => Path::new("."),
        Some(p) => p,
        None => Path::new("."),
    }
}
