use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use fluxsteg_core::dataset::{
    build_dataset, cfg_key, split_manifest, BuildOptions, HttpBackend, ProceduralBackend, RecordedBackend,
    ResizeOnIngest, T2IBackend, CFG_STEP,
};
use serde::Serialize;

use crate::run::{parse_size, write_atomic, RunRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Offline synthetic scenes.
    Procedural,
    /// Images previously stored under `<dir>/<prompt-hash>/<seed>/<cfg>.pgm`.
    Recorded,
    /// A generation service reached over HTTP.
    Http,
}

#[derive(Debug, Args, Serialize)]
pub struct DatasetArgs {
    /// One prompt per line; blank lines and lines starting with `#` are skipped.
    #[arg(long)]
    pub prompts: PathBuf,
    /// Seeds per prompt, counted up from `--first-seed`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    #[arg(long, value_enum, default_value = "procedural", env = "FLUXSTEG_BACKEND")]
    pub backend: BackendKind,
    #[arg(long, env = "FLUXSTEG_ENDPOINT")]
    pub endpoint: Option<String>,
    #[arg(long, env = "FLUXSTEG_TOKEN", hide_env_values = true)]
    #[serde(skip)]
    pub token: Option<String>,
    #[arg(long, env = "FLUXSTEG_TIMEOUT_SECS", default_value_t = 120)]
    pub timeout_secs: u64,
    #[arg(long, env = "FLUXSTEG_RETRIES", default_value_t = 2)]
    pub retries: u32,
    #[arg(long)]
    pub recorded_dir: Option<PathBuf>,
    /// Image size; procedural scenes are drawn at it, other backends are
    /// resized to it when given.
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
    /// Procedural perturbation amplitude in gray levels.
    #[arg(long, default_value_t = 2.0)]
    pub amplitude: f64,
    #[arg(long, default_value_t = fluxsteg_core::dataset::DEFAULT_BASE_CFG)]
    pub base_cfg: f64,
    /// Fluctuations per cover, at scales base ± k·0.001.
    #[arg(long, default_value_t = 10)]
    pub fluctuations: usize,
    /// Largest accepted MSE between a fluctuation and its cover.
    #[arg(long, default_value_t = fluxsteg_core::dataset::DEFAULT_TAU)]
    pub tau: f64,
    /// Replacement attempts per set before giving up.
    #[arg(long, default_value_t = 20)]
    pub max_retries: usize,
    /// Concurrent backend requests.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value = "dataset")]
    pub name: String,
    /// Train,val,test sizes; writes `train.tsv`, `val.tsv` and `test.tsv`.
    #[arg(long, value_parser = parse_split)]
    pub split: Option<(usize, usize, usize)>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Validate the configuration and print the plan without generating.
    #[arg(long)]
    pub dry_run: bool,
}

fn parse_split(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad split size {p:?}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(format!("expected train,val,test sizes, got {s:?}")),
    }
}

/// Scales alternating above and below the base: +1, −1, +2, −2, ...
fn sweep(base: f64, n: usize) -> Vec<f64> {
    let base_key = cfg_key(base);
    let step = cfg_key(CFG_STEP);
    (0..n as i64)
        .map(|k| {
            let m = k / 2 + 1;
            let key = if k % 2 == 0 { base_key + m * step } else { base_key - m * step };
            key as f64 / 1e4
        })
        .collect()
}

pub fn read_prompts(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading prompt file {}", path.display()))?;
    let prompts: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect();
    if prompts.is_empty() {
        bail!("prompt file {} has no prompts", path.display());
    }
    Ok(prompts)
}

fn backend(a: &DatasetArgs) -> Result<Box<dyn T2IBackend>> {
    let boxed: Box<dyn T2IBackend> = match a.backend {
        BackendKind::Procedural => {
            let (h, w) = a.size.unwrap_or((64, 64));
            Box::new(ProceduralBackend { amplitude: a.amplitude, ..ProceduralBackend::new(h, w) })
        }
        BackendKind::Recorded => {
            let dir = a.recorded_dir.as_ref().context("--recorded-dir is required for the recorded backend")?;
            if !dir.is_dir() {
                bail!("recorded directory {} does not exist", dir.display());
            }
            wrap(RecordedBackend::new(dir), a.size)
        }
        BackendKind::Http => {
            let endpoint = a
                .endpoint
                .clone()
                .context("--endpoint or FLUXSTEG_ENDPOINT is required for the http backend")?;
            let b = HttpBackend {
                token: a.token.clone(),
                timeout: Duration::from_secs(a.timeout_secs),
                retries: a.retries,
                ..HttpBackend::new(endpoint)
            };
            wrap(b, a.size)
        }
    };
    Ok(boxed)
}

fn wrap<B: T2IBackend + 'static>(b: B, size: Option<(usize, usize)>) -> Box<dyn T2IBackend> {
    match size {
        Some((height, width)) => Box::new(ResizeOnIngest { inner: b, height, width }),
        None => Box::new(b),
    }
}

pub fn run(a: DatasetArgs) -> Result<()> {
    let prompts = read_prompts(&a.prompts)?;
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    if !(a.tau >= 0.0) {
        bail!("--tau must be non-negative");
    }
    if a.fluctuations == 0 {
        bail!("--fluctuations must be at least 1");
    }
    let jobs: Vec<(String, u64)> = prompts
        .iter()
        .flat_map(|p| (0..a.seeds).map(move |s| (p.clone(), a.first_seed + s)))
        .collect();
    if let Some((x, y, z)) = a.split {
        let total = x + y + z;
        if total > jobs.len() {
            bail!("split sizes {x},{y},{z} need {total} sets but only {} will be generated", jobs.len());
        }
    }
    let opts = BuildOptions {
        name: a.name.clone(),
        base_cfg: a.base_cfg,
        sweep: sweep(a.base_cfg, a.fluctuations),
        tau: a.tau,
        max_retries: a.max_retries,
        max_in_flight: a.jobs.max(1),
    };
    let backend = backend(&a)?;
    let mut record = RunRecord::new("dataset", &a).seed(a.first_seed);
    if a.dry_run {
        println!(
            "dry run: {} prompts x {} seeds = {} sets, {} images per set, backend {}, tau {}",
            prompts.len(),
            a.seeds,
            jobs.len(),
            1 + a.fluctuations,
            backend.describe(),
            a.tau
        );
        return Ok(());
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (manifest, rejected) = build_dataset(backend.as_ref(), &jobs, &a.out, &opts)?;
    let generated = manifest.len() * (1 + a.fluctuations) + rejected;
    log::info!(
        "{} sets written; {rejected} of {generated} generated images rejected ({:.1}%)",
        manifest.len(),
        100.0 * rejected as f64 / generated as f64
    );
    record.input(&a.prompts);
    let main = a.out.join("manifest.tsv");
    manifest.save(&main)?;
    record.output(&main);
    if let Some(sizes) = a.split {
        let parts = split_manifest(&manifest, sizes, a.split_seed)?;
        for part in parts {
            let path = a.out.join(format!("{}.tsv", part.role));
            part.save(&path)?;
            record.output(&path);
        }
    }
    let stats = serde_json::json!({ "sets": manifest.len(), "rejected": rejected, "generated": generated });
    write_atomic(&a.out.join("rejections.json"), stats.to_string().as_bytes())?;
    record.write(&a.out.join("run.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_alternates_around_base() {
        assert_eq!(sweep(7.5, 4), vec![7.501, 7.499, 7.502, 7.498]);
    }
}
