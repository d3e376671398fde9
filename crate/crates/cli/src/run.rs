//! Run manifests and shared argument helpers.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// What a command consumed and produced, enough to rerun it.
pub struct RunRecord {
    command: &'static str,
    config: Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl RunRecord {
    /// Logs the effective configuration.
    pub fn new(command: &'static str, config: &impl Serialize) -> Self {
        let config = serde_json::to_value(config).expect("config serializes");
        log::info!("{command}: effective config {config}");
        Self {
            command,
            config,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Written atomically to `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let canonical = serde_json::to_string(&self.config).expect("json");
        let inputs = self
            .inputs
            .iter()
            .map(|p| Ok(json!({ "path": p, "sha256": file_digest(p)? })))
            .collect::<Result<Vec<_>>>()?;
        let doc = json!({
            "command": self.command,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "config_hash": sha256_hex(canonical.as_bytes()),
            "config": self.config,
            "inputs": inputs,
            "outputs": self.outputs,
        });
        write_atomic(path, serde_json::to_string_pretty(&doc).expect("json").as_bytes())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))
}

/// `<file>.run.json` beside a file output.
pub fn sidecar(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    output.with_file_name(name)
}

/// Parse `HxW`.
pub fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    Ok((h, w))
}

/// Payloads in bits per pixel, each in (0, 1].
pub fn check_payloads(payloads: &[f64]) -> Result<()> {
    if payloads.is_empty() {
        bail!("at least one payload is required");
    }
    for &q in payloads {
        if !(q > 0.0 && q <= 1.0) {
            bail!("payload {q} bpp outside (0, 1]");
        }
    }
    Ok(())
}

/// Directory name for one payload of a sweep, e.g. `q0.4`.
pub fn payload_label(q: f64) -> String {
    format!("q{q}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("64x48"), Ok((64, 48)));
        assert!(parse_size("64").is_err());
        assert!(parse_size("ax3").is_err());
    }

    #[test]
    fn sidecar_appends_suffix() {
        assert_eq!(sidecar(Path::new("out/a.pgm")), PathBuf::from("out/a.pgm.run.json"));
    }

    #[test]
    fn payload_checks() {
        assert!(check_payloads(&[0.1, 0.4]).is_ok());
        assert!(check_payloads(&[]).is_err());
        assert!(check_payloads(&[1.5]).is_err());
    }
}
