//! Artifact writing: JSON outputs, CSV traces, the run manifest, and the
//! binary sample container.
//!
//! JSON artifacts are byte-reproducible for a fixed config and seed; the
//! wall-clock timestamp lives only in manifest.json.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const SAMPLES_MAGIC: &[u8; 8] = b"MFCSAMP1";

/// Collects input hashes and output names for the manifest.
pub struct RunContext {
    out_dir: PathBuf,
    command: String,
    seed: Option<u64>,
    threads: Option<usize>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: Option<u64>,
    threads: Option<usize>,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a [String],
    status: &'a str,
    error_code: Option<&'a str>,
    error: Option<&'a str>,
    timestamp_unix: u64,
}

impl RunContext {
    pub fn new(out_dir: &Path, command: &str, seed: Option<u64>, threads: Option<usize>) -> Result<Self> {
        fs::create_dir_all(out_dir)
            .with_context(|| format!("creating output directory {}", out_dir.display()))?;
        Ok(RunContext {
            out_dir: out_dir.to_path_buf(),
            command: command.to_string(),
            seed,
            threads,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    /// Read an input file, recording its sha256 in the manifest.
    pub fn read_input(&mut self, path: &Path) -> Result<String> {
        let bytes = fs::read(path)
            .with_context(|| format!("reading input file {}", path.display()))?;
        let digest = Sha256::digest(&bytes);
        self.inputs
            .insert(path.display().to_string(), format!("sha256:{}", hex::encode(digest)));
        String::from_utf8(bytes).with_context(|| format!("{} is not UTF-8", path.display()))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        let text = serde_json::to_string_pretty(value)?;
        fs::write(&path, text.as_bytes())
            .with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(name.to_string());
        Ok(path)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        fs::write(&path, text.as_bytes())
            .with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(name.to_string());
        Ok(path)
    }

    /// CSV with a header row and one row per record.
    pub fn write_csv(&mut self, name: &str, header: &str, rows: &[Vec<f64>]) -> Result<PathBuf> {
        let mut text = String::with_capacity(rows.len() * 24 + header.len() + 1);
        text.push_str(header);
        text.push('\n');
        for row in rows {
            let mut first = true;
            for v in row {
                if !first {
                    text.push(',');
                }
                first = false;
                text.push_str(&format!("{v}"));
            }
            text.push('\n');
        }
        self.write_text(name, &text)
    }

    /// Little-endian f64 matrix with the 8-byte magic and u64 dimensions.
    pub fn write_samples_bin(&mut self, name: &str, n_draws: usize, n: usize, draws: &[f64]) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        let mut file = fs::File::create(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        file.write_all(SAMPLES_MAGIC)?;
        file.write_all(&(n_draws as u64).to_le_bytes())?;
        file.write_all(&(n as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(draws.len() * 8);
        for v in draws {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&buf)?;
        self.outputs.push(name.to_string());
        Ok(path)
    }

    /// Write manifest.json; `status` is ok/gate/error/acceptance-failed.
    pub fn finish(&self, status: &str, error_code: Option<&str>, error: Option<&str>) -> Result<()> {
        let manifest = Manifest {
            tool: "mfcert",
            version: env!("CARGO_PKG_VERSION"),
            command: &self.command,
            seed: self.seed,
            threads: self.threads,
            inputs: &self.inputs,
            outputs: &self.outputs,
            status,
            error_code,
            error,
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let path = self.out_dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
