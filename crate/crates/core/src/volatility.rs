//! Costs from the pixel spread of a fluctuation stack, and their blend with
//! learned costs.
//!
//! Each pixel of the stack (cover included) is modelled as a Gaussian. The
//! cost of moving the cover value `c` to `c ± 1` is the negative log ratio
//! of the probability masses of the two integer bins, floored at zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::FluctuationSet;
use crate::embedding::{is_wet, CostMap, EmbedError, WET_COST};

/// Pixels whose spread falls below this many gray levels are wet.
pub const SIGMA_MIN: f64 = 0.1;

/// Default weight of the volatility cost in the blend.
pub const DEFAULT_VC_BETA: f64 = 0.15;

#[derive(Debug, Error)]
pub enum VolatilityError {
    #[error("need at least 2 fluctuation images, got {0}")]
    TooFew(usize),
    #[error("vc_beta {0} outside [0, 1]")]
    Beta(f64),
    #[error("{0} cost map has no dry pixels; cannot equalize means")]
    AllWet(&'static str),
    #[error("shapes differ: {a:?} vs {b:?}")]
    Shape { a: (usize, usize), b: (usize, usize) },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolatilityCost {
    pub costs: CostMap,
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl VolatilityCost {
    pub fn wet_mask(&self) -> Vec<bool> {
        (0..self.costs.len()).map(|i| self.costs.is_wet_at(i)).collect()
    }
}

fn bin_mass(v: f64, mu: f64, sigma: f64) -> f64 {
    let s = sigma * std::f64::consts::SQRT_2;
    let a = (v - 0.5 - mu) / s;
    let b = (v + 0.5 - mu) / s;
    // Difference of upper tails on the far side of the mean keeps precision.
    if a >= 0.0 {
        0.5 * (libm::erfc(a) - libm::erfc(b))
    } else if b <= 0.0 {
        0.5 * (libm::erfc(-b) - libm::erfc(-a))
    } else {
        0.5 * (libm::erf(b) - libm::erf(a))
    }
}

/// Cost of moving `c` to `target` under the pixel model.
fn move_cost(c: f64, target: f64, mu: f64, sigma: f64) -> f64 {
    if !(0.0..=255.0).contains(&target) {
        return WET_COST;
    }
    let pc = bin_mass(c, mu, sigma);
    let pt = bin_mass(target, mu, sigma);
    if pt <= 0.0 {
        return WET_COST;
    }
    if pc <= 0.0 {
        return 0.0;
    }
    (-(pt / pc).ln()).max(0.0)
}

/// Fit per-pixel mean and unbiased standard deviation over the cover and
/// its fluctuations, then derive costs for ±1.
pub fn estimate_volatility_cost(set: &FluctuationSet) -> Result<VolatilityCost, VolatilityError> {
    if set.fluctuations.len() < 2 {
        return Err(VolatilityError::TooFew(set.fluctuations.len()));
    }
    let (h, w) = set.cover.shape();
    for f in &set.fluctuations {
        if f.shape() != (h, w) {
            return Err(VolatilityError::Shape { a: (h, w), b: f.shape() });
        }
    }
    let k = (set.fluctuations.len() + 1) as f64;
    let n = h * w;
    let mut mean = vec![0.0; n];
    let mut sigma = vec![0.0; n];
    let mut plus = vec![0.0; n];
    let mut minus = vec![0.0; n];
    for i in 0..n {
        let samples = std::iter::once(&set.cover).chain(&set.fluctuations).map(|img| img.pixels()[i] as f64);
        let mu = samples.clone().sum::<f64>() / k;
        let var = samples.map(|v| (v - mu) * (v - mu)).sum::<f64>() / (k - 1.0);
        let sd = var.sqrt();
        mean[i] = mu;
        sigma[i] = sd;
        if sd < SIGMA_MIN {
            plus[i] = WET_COST;
            minus[i] = WET_COST;
            continue;
        }
        let c = set.cover.pixels()[i] as f64;
        plus[i] = move_cost(c, c + 1.0, mu, sd);
        minus[i] = move_cost(c, c - 1.0, mu, sd);
    }
    Ok(VolatilityCost {
        costs: CostMap::new(h, w, plus, minus)?,
        mean,
        sigma,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CombineConfig {
    pub vc_beta: f64,
}

impl Default for CombineConfig {
    fn default() -> Self {
        Self {
            vc_beta: DEFAULT_VC_BETA,
        }
    }
}

fn dry_mean(c: &CostMap) -> Option<f64> {
    let dry: Vec<f64> = c.plus().iter().chain(c.minus()).copied().filter(|&v| !is_wet(v)).collect();
    if dry.is_empty() {
        None
    } else {
        Some(dry.iter().map(|v| v.max(0.0)).sum::<f64>() / dry.len() as f64)
    }
}

/// Ratio of the mean dry volatility cost to the mean dry original cost.
pub fn vc_alpha(rho_o: &CostMap, rho_v: &CostMap) -> Result<f64, VolatilityError> {
    let mv = dry_mean(rho_v).ok_or(VolatilityError::AllWet("volatility"))?;
    let mo = dry_mean(rho_o).ok_or(VolatilityError::AllWet("original"))?;
    if mo == 0.0 {
        return Err(VolatilityError::AllWet("original (zero mean)"));
    }
    Ok(mv / mo)
}

/// `ρc(±1) = β·ρv(±1) + (1 − β)·α·ρo(±1)`, wet where either input is wet.
/// Negative original costs are floored at zero first.
pub fn combine_costs(rho_o: &CostMap, rho_v: &CostMap, cfg: &CombineConfig) -> Result<(CostMap, f64), VolatilityError> {
    if !(0.0..=1.0).contains(&cfg.vc_beta) {
        return Err(VolatilityError::Beta(cfg.vc_beta));
    }
    if rho_o.shape() != rho_v.shape() {
        return Err(VolatilityError::Shape {
            a: rho_o.shape(),
            b: rho_v.shape(),
        });
    }
    let alpha = vc_alpha(rho_o, rho_v)?;
    let beta = cfg.vc_beta;
    let mix = |o: &[f64], v: &[f64]| -> Vec<f64> {
        o.iter()
            .zip(v)
            .map(|(&o, &v)| {
                if is_wet(o) || is_wet(v) {
                    WET_COST
                } else {
                    beta * v + (1.0 - beta) * alpha * o.max(0.0)
                }
            })
            .collect()
    };
    let (h, w) = rho_o.shape();
    let plus = mix(rho_o.plus(), rho_v.plus());
    let minus = mix(rho_o.minus(), rho_v.minus());
    Ok((CostMap::new(h, w, plus, minus)?, alpha))
}
