//! Cover and fluctuation datasets from a text-to-image backend.
//!
//! A fluctuation set holds a cover generated at a base CFG scale and `N`
//! siblings generated at nearby scales. Siblings whose mean squared
//! difference from the cover exceeds `tau` changed content rather than
//! texture and are replaced by generating at a fresh scale.

pub mod backend;
pub mod manifest;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{ImageError, ImageGray};
pub use backend::{
    BackendError, HttpBackend, ProceduralBackend, RecordedBackend, ResizeOnIngest, T2IBackend,
};
pub use manifest::{build_dataset, split_manifest, BuildOptions, DatasetManifest, ManifestEntry, Role};

/// Default MSE threshold, five gray levels squared.
pub const DEFAULT_TAU: f64 = 25.0;

/// The base CFG scale of the covers.
pub const DEFAULT_BASE_CFG: f64 = 7.5;

/// Step between neighbouring CFG values.
pub const CFG_STEP: f64 = 0.001;

/// Ten scales around the base: 7.4950 to 7.5050 in steps of 0.0010,
/// skipping 7.5000.
pub fn default_sweep() -> Vec<f64> {
    (-5i32..=5)
        .filter(|&k| k != 0)
        .map(|k| cfg_from_key(75_000 + 10 * k as i64))
        .collect()
}

/// CFG scales compared in units of 1e-4.
pub fn cfg_key(cfg: f64) -> i64 {
    (cfg * 1e4).round() as i64
}

fn cfg_from_key(key: i64) -> f64 {
    key as f64 / 1e4
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("image shapes differ: {a:?} vs {b:?}")]
    Shape { a: (usize, usize), b: (usize, usize) },
    #[error(
        "generation exhausted for prompt {prompt:?} seed {seed}: {accepted} of {required} fluctuations accepted after {rejected} rejections"
    )]
    GenerationExhausted {
        prompt: String,
        seed: u64,
        accepted: usize,
        required: usize,
        rejected: usize,
    },
    #[error("backend failed for {request:?}: {source}")]
    Backend {
        request: GenerationRequest,
        #[source]
        source: BackendError,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("manifest {path}, line {line}: {message}")]
    Manifest {
        path: String,
        line: usize,
        message: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("split sizes {requested:?} exceed the {available} available entries")]
    Size {
        requested: (usize, usize, usize),
        available: usize,
    },
}

/// Mean squared pixel difference.
pub fn mse(a: &ImageGray, b: &ImageGray) -> Result<f64, DatasetError> {
    if a.shape() != b.shape() {
        return Err(DatasetError::Shape {
            a: a.shape(),
            b: b.shape(),
        });
    }
    let sum: u64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| {
            let d = x as i64 - y as i64;
            (d * d) as u64
        })
        .sum();
    Ok(sum as f64 / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub seed: u64,
    pub cfg_scale: f64,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, seed: u64, cfg_scale: f64) -> Result<Self, DatasetError> {
        if !(cfg_scale > 0.0) {
            return Err(DatasetError::Config(format!("cfg_scale must be positive, got {cfg_scale}")));
        }
        Ok(Self {
            prompt: prompt.into(),
            seed,
            cfg_scale,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluctuationSet {
    pub cover: ImageGray,
    pub fluctuations: Vec<ImageGray>,
    /// The cover's scale first, then one per fluctuation.
    pub cfg_values: Vec<f64>,
    pub prompt: String,
    pub seed: u64,
    pub tau: f64,
    /// Scales whose images were discarded by the threshold.
    pub rejected_cfgs: Vec<f64>,
}

impl FluctuationSet {
    pub fn n(&self) -> usize {
        self.fluctuations.len()
    }

    /// Check every structural invariant.
    pub fn validate(&self) -> Result<(), DatasetError> {
        self.cover.check_dataset_size()?;
        if self.cfg_values.len() != self.fluctuations.len() + 1 {
            return Err(DatasetError::Config(format!(
                "{} cfg values for {} fluctuations",
                self.cfg_values.len(),
                self.fluctuations.len()
            )));
        }
        let mut keys: Vec<i64> = self.cfg_values.iter().map(|&c| cfg_key(c)).collect();
        keys.sort_unstable();
        if keys.windows(2).any(|w| w[0] == w[1]) {
            return Err(DatasetError::Config("duplicate cfg values".into()));
        }
        for (k, f) in self.fluctuations.iter().enumerate() {
            let d = mse(&self.cover, f)?;
            if d > self.tau {
                return Err(DatasetError::Config(format!(
                    "fluctuation {k} has mse {d} above tau {}",
                    self.tau
                )));
            }
        }
        Ok(())
    }
}

/// Replacement scales: the sweep extended outward one step at a time,
/// alternating above and below.
fn replacement_cfgs(sweep: &[f64]) -> impl Iterator<Item = i64> {
    let keys: Vec<i64> = sweep.iter().map(|&c| cfg_key(c)).collect();
    let hi = *keys.iter().max().expect("non-empty sweep");
    let lo = *keys.iter().min().expect("non-empty sweep");
    let step = cfg_key(CFG_STEP);
    (1i64..)
        .flat_map(move |k| [hi + k * step, lo - k * step])
        .filter(|&k| k > 0)
}

/// Generate a cover at `base_cfg` and one accepted fluctuation per sweep
/// value, replacing rejected ones at fresh scales.
pub fn build_fluctuation_set(
    backend: &dyn T2IBackend,
    prompt: &str,
    seed: u64,
    base_cfg: f64,
    sweep: &[f64],
    tau: f64,
    max_retries: usize,
) -> Result<FluctuationSet, DatasetError> {
    if sweep.is_empty() {
        return Err(DatasetError::Config("empty cfg sweep".into()));
    }
    let base_key = cfg_key(base_cfg);
    let mut sweep_keys: Vec<i64> = sweep.iter().map(|&c| cfg_key(c)).collect();
    if sweep_keys.contains(&base_key) {
        return Err(DatasetError::Config(format!("base cfg {base_cfg} appears in the sweep")));
    }
    sweep_keys.sort_unstable();
    if sweep_keys.windows(2).any(|w| w[0] == w[1]) {
        return Err(DatasetError::Config("duplicate values in the cfg sweep".into()));
    }
    if !(tau >= 0.0) {
        return Err(DatasetError::Config(format!("tau must be non-negative, got {tau}")));
    }
    let generate = |cfg: f64| -> Result<ImageGray, DatasetError> {
        let request = GenerationRequest::new(prompt, seed, cfg)?;
        backend
            .generate(&request)
            .map_err(|source| DatasetError::Backend { request, source })
    };
    let cover = generate(base_cfg)?;
    cover.check_dataset_size()?;

    let mut used: Vec<i64> = vec![base_key];
    let mut candidates: Vec<f64> = sweep.iter().rev().copied().collect();
    let mut extra = replacement_cfgs(sweep);
    let mut fluctuations = Vec::with_capacity(sweep.len());
    let mut cfg_values = vec![base_cfg];
    let mut rejected_cfgs = Vec::new();
    while fluctuations.len() < sweep.len() {
        let cfg = match candidates.pop() {
            Some(c) => c,
            None => cfg_from_key(extra.find(|k| !used.contains(k)).expect("unbounded iterator")),
        };
        used.push(cfg_key(cfg));
        let img = generate(cfg)?;
        let d = mse(&cover, &img)?;
        if d <= tau {
            fluctuations.push(img);
            cfg_values.push(cfg);
        } else {
            log::debug!("rejected cfg {cfg:.4} for {prompt:?}/{seed}: mse {d:.3} > tau {tau}");
            rejected_cfgs.push(cfg);
            if rejected_cfgs.len() > max_retries {
                return Err(DatasetError::GenerationExhausted {
                    prompt: prompt.to_string(),
                    seed,
                    accepted: fluctuations.len(),
                    required: sweep.len(),
                    rejected: rejected_cfgs.len(),
                });
            }
        }
    }
    Ok(FluctuationSet {
        cover,
        fluctuations,
        cfg_values,
        prompt: prompt.to_string(),
        seed,
        tau,
        rejected_cfgs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_examples() {
        let a = ImageGray::filled(2, 2, 0);
        let b = ImageGray::filled(2, 2, 1);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
        assert!(mse(&a, &ImageGray::filled(2, 3, 0)).is_err());
    }

    #[test]
    fn mse_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = ImageGray::new(8, 8, (0..64).map(|_| rng.random()).collect()).unwrap();
        let b = ImageGray::new(8, 8, (0..64).map(|_| rng.random()).collect()).unwrap();
        let mut acc = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                let d = a.get(i, j) as f64 - b.get(i, j) as f64;
                acc += d * d;
            }
        }
        assert!((mse(&a, &b).unwrap() - acc / 64.0).abs() < 1e-12);
        assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
    }

    #[test]
    fn default_sweep_values() {
        let s: Vec<String> = default_sweep().iter().map(|c| format!("{c:.4}")).collect();
        assert_eq!(
            s,
            [
                "7.4950", "7.4960", "7.4970", "7.4980", "7.4990", "7.5010", "7.5020", "7.5030",
                "7.5040", "7.5050"
            ]
        );
    }

    #[test]
    fn replacements_extend_outward() {
        let r: Vec<i64> = replacement_cfgs(&default_sweep()).take(4).collect();
        assert_eq!(r, vec![75_060, 74_940, 75_070, 74_930]);
    }

    #[test]
    fn rejects_nonpositive_cfg() {
        assert!(GenerationRequest::new("x", 0, 0.0).is_err());
    }
}
