use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Record of one command invocation, written next to its main output as
/// `<output>.run.json`.
#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RunManifest {
    pub command: &'static str,
    pub version: &'static str,
    pub core_version: &'static str,
    pub threads: usize,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
    /// Command-specific summary values.
    pub summary: BTreeMap<String, serde_json::Value>,
    #[serde(skip)]
    started: Option<Instant>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

impl RunManifest {
    pub fn new(command: &'static str, args: &impl Serialize, threads: usize) -> Result<Self> {
        Ok(RunManifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            core_version: xmq_core::VERSION,
            threads,
            config: serde_json::to_value(args)?,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
            summary: BTreeMap::new(),
            started: Some(Instant::now()),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputDigest {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.summary.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    /// Runs `f` and records its wall-clock time under `phase`.
    pub fn timed<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.insert(phase.to_string(), start.elapsed().as_secs_f64());
        out
    }

    pub fn finish(mut self, main_output: &Path) -> Result<PathBuf> {
        if let Some(start) = self.started.take() {
            self.timings.insert("total".into(), start.elapsed().as_secs_f64());
        }
        let path = run_manifest_path(main_output);
        xmq_core::io::save_json(&self, &path)?;
        Ok(path)
    }
}

/// `<output>.run.json` beside the output, even when the output is a
/// directory given with a trailing slash.
pub fn run_manifest_path(main_output: &Path) -> PathBuf {
    let mut name = main_output
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "output".into());
    name.push(".run.json");
    match main_output.parent() {
        Some(parent) => parent.join(name),
        None => PathBuf::from(name),
    }
}
