//! Adversarial training of the generator against two discriminators.
//!
//! Each iteration draws a batch of fluctuation sets, maps the covers to
//! probabilities, simulates embedding with the double-tanh function,
//! scores the stegos with both discriminators, updates one discriminator
//! according to the strategy and then updates the generator with
//! `l_G = −α·l_a + β·l_e`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use fluxsteg_nn::{archive, Adam, AdamConfig, Graph, Mode, Tensor, Unary, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{
    assignment_update, choose, combine_shared, stacked_cross_entropy, Arch, Discriminator, DiscriminatorId,
    LossPair, UpdateLog, UpdateRecord,
};
use crate::dataset::FluctuationSet;
use crate::embedding::{self, ProbabilityMap, DEFAULT_GAMMA};
use crate::generator::{images_to_tensor, Generator, GeneratorConfig, GeneratorError};
use crate::image::ImageGray;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite {
        iteration: u64,
        detail: String,
        /// Directory holding the parameters and batch that produced it.
        snapshot: Option<PathBuf>,
    },
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Adversary(#[from] crate::adversary::AdversaryError),
    #[error(transparent)]
    Archive(#[from] archive::ArchiveError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// D1 on (cover, stego), D2 on (fluctuation, stego); the larger loss
    /// updates.
    Assignment,
    /// Both discriminators on both tasks, combined with `lambda_prime`.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Generator updates to run.
    pub iterations: u64,
    pub batch_size: usize,
    /// Generator learning rate.
    pub lr: f64,
    /// Discriminator learning rate.
    pub d_lr: f64,
    /// Both rates are multiplied by `lr_decay` every `decay_every`
    /// iterations.
    pub lr_decay: f64,
    pub decay_every: u64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
    /// Payload in bits per pixel.
    pub payload: f64,
    pub strategy: Strategy,
    pub lambda_prime: f64,
    pub d1_arch: Arch,
    pub d2_arch: Arch,
    pub bn_momentum: f64,
    pub seed: u64,
    /// Write checkpoints every this many iterations; 0 disables.
    pub checkpoint_every: u64,
    pub generator: GeneratorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch_size: 8,
            lr: 1e-4,
            d_lr: 1e-4,
            lr_decay: 0.9,
            decay_every: 5000,
            alpha: 1.0,
            beta: 1e-7,
            lambda: 1.0,
            gamma: DEFAULT_GAMMA,
            payload: 0.4,
            strategy: Strategy::Assignment,
            lambda_prime: 1.0,
            d1_arch: Arch::Strong,
            d2_arch: Arch::Weak,
            bn_momentum: 0.1,
            seed: 0,
            checkpoint_every: 0,
            generator: GeneratorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("alpha", self.alpha),
            ("lambda", self.lambda),
            ("gamma", self.gamma),
            ("payload", self.payload),
            ("lr", self.lr),
            ("d_lr", self.d_lr),
            ("lambda_prime", self.lambda_prime),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        // β = 0 is allowed to switch the payload term off.
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(TrainError::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.payload >= 1.0 {
            return Err(TrainError::Config(format!("payload must be below 1 bpp, got {}", self.payload)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.decay_every == 0 {
            return Err(TrainError::Config("lr_decay in (0, 1] and decay_every > 0 required".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(TrainError::Config(format!("bn_momentum {}", self.bn_momentum)));
        }
        self.generator.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Rate multiplier at `iteration`.
    pub fn decay_factor(&self, iteration: u64) -> f64 {
        self.lr_decay.powi((iteration / self.decay_every) as i32)
    }
}

/// Embedding capacity in bits of a probability map.
pub fn capacity(p: &ProbabilityMap) -> f64 {
    embedding::capacity(p)
}

/// Squared deviation of the capacity from `H·W·q` bits.
pub fn entropy_loss(p: &ProbabilityMap, q: f64) -> f64 {
    let (h, w) = p.shape();
    let d = capacity(p) - (h * w) as f64 * q;
    d * d
}

/// Per-sample capacities `[N]` of total probabilities `p [N, 1, H, W]`.
pub fn capacity_var(g: &mut Graph, p: Var) -> Var {
    let h = g.unary(p, Unary::SymTernaryEntropy);
    g.sum_per_sample(h)
}

/// Batch mean of the squared payload deviation.
pub fn entropy_loss_var(g: &mut Graph, p: Var, q: f64) -> Var {
    let (_, _, h, w) = g.value(p).dims4();
    let cap = capacity_var(g, p);
    let dev = g.affine(cap, 1.0, -((h * w) as f64) * q);
    let sq = g.unary(dev, Unary::Square);
    g.mean(sq)
}

/// `(l_G, l_a)` with `l_a = e1 + λ·e2` and `l_G = −α·l_a + β·l_e`.
pub fn generator_loss(e1: f64, e2: f64, l_e: f64, cfg: &TrainConfig) -> (f64, f64) {
    let l_a = e1 + cfg.lambda * e2;
    (-cfg.alpha * l_a + cfg.beta * l_e, l_a)
}

/// Continuous stego `clamp(C + M, 0, 255)` with the double-tanh change
/// `M = ½tanh(γ(p/2 − (1 − r))) − ½tanh(γ(p/2 − r))`.
pub fn simulate_stego(g: &mut Graph, cover_raw: &Tensor, p: Var, r: &[f64], gamma: f64) -> Var {
    let shape = cover_raw.shape().to_vec();
    assert_eq!(r.len(), cover_raw.numel());
    let half = g.scale(p, gamma / 2.0);
    let shift_plus = g.constant(Tensor::new(&shape, r.iter().map(|&r| -gamma * (1.0 - r)).collect()));
    let shift_minus = g.constant(Tensor::new(&shape, r.iter().map(|&r| -gamma * r).collect()));
    let a = g.add(half, shift_plus);
    let a = g.tanh(a);
    let b = g.add(half, shift_minus);
    let b = g.tanh(b);
    let diff = g.sub(a, b);
    let m = g.scale(diff, 0.5);
    let c = g.constant(cover_raw.clone());
    let s = g.add(c, m);
    g.clamp(s, 0.0, 255.0)
}

/// Metrics of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub l_g: f64,
    pub l_a: f64,
    pub l_e: f64,
    pub e1: f64,
    pub e2: f64,
    /// Mean over the batch of `|capacity − H·W·q|` in bits.
    pub payload_dev: f64,
    pub lr: f64,
    pub updated: DiscriminatorId,
    pub batch: Vec<usize>,
    pub flu_index: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub generator: Generator,
    pub d1: Discriminator,
    pub d2: Discriminator,
    pub g_optimizer: Adam,
    pub iteration: u64,
    pub history: Vec<IterationRecord>,
    pub update_log: UpdateLog,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self, TrainError> {
        let mut gcfg = cfg.generator;
        gcfg.init_seed = cfg.seed.wrapping_mul(3).wrapping_add(gcfg.init_seed);
        Ok(Self {
            generator: Generator::new(gcfg)?,
            d1: Discriminator::new(DiscriminatorId::D1, cfg.d1_arch, cfg.seed.wrapping_mul(3).wrapping_add(1)),
            d2: Discriminator::new(DiscriminatorId::D2, cfg.d2_arch, cfg.seed.wrapping_mul(3).wrapping_add(2)),
            g_optimizer: Adam::new(AdamConfig::default()),
            iteration: 0,
            history: Vec::new(),
            update_log: UpdateLog::default(),
        })
    }
}

/// Drives [`TrainState`] over in-memory fluctuation sets.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub state: TrainState,
    sets: Vec<FluctuationSet>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    out_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, sets: Vec<FluctuationSet>) -> Result<Self, TrainError> {
        cfg.validate()?;
        if sets.is_empty() {
            return Err(TrainError::Config("no training sets".into()));
        }
        let shape = sets[0].cover.shape();
        for (k, s) in sets.iter().enumerate() {
            if s.fluctuations.is_empty() {
                return Err(TrainError::Config(format!("set {k} has no fluctuation images")));
            }
            if s.cover.shape() != shape || s.fluctuations.iter().any(|f| f.shape() != shape) {
                return Err(TrainError::Config(format!("set {k} differs in size from set 0")));
            }
        }
        if cfg.batch_size > sets.len() {
            return Err(TrainError::Config(format!(
                "batch_size {} exceeds the {} available sets",
                cfg.batch_size,
                sets.len()
            )));
        }
        let state = TrainState::new(&cfg)?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            state,
            sets,
            order: Vec::new(),
            cursor: 0,
            out_dir: None,
        })
    }

    /// Write metrics, the update log and checkpoints under `dir`.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Result<Self, TrainError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        self.out_dir = Some(dir);
        Ok(self)
    }

    pub fn sets(&self) -> &[FluctuationSet] {
        &self.sets
    }

    /// Distinct set indices, reshuffled each pass over the data.
    fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        while batch.len() < self.cfg.batch_size {
            if self.cursor >= self.order.len() {
                self.order = (0..self.sets.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let k = self.order[self.cursor];
            self.cursor += 1;
            if !batch.contains(&k) {
                batch.push(k);
            }
        }
        batch
    }

    /// Run one iteration.
    pub fn step(&mut self) -> Result<&IterationRecord, TrainError> {
        let it = self.state.iteration;
        let cfg = &self.cfg;
        let lr_scale = cfg.decay_factor(it);
        let batch = self.next_batch();
        let flu_index: Vec<usize> = batch
            .iter()
            .map(|&k| self.rng.random_range(0..self.sets[k].fluctuations.len()))
            .collect();
        let covers: Vec<ImageGray> = batch.iter().map(|&k| self.sets[k].cover.clone()).collect();
        let flus: Vec<ImageGray> = batch
            .iter()
            .zip(&flu_index)
            .map(|(&k, &f)| self.sets[k].fluctuations[f].clone())
            .collect();
        let n = covers.len();
        let (h, w) = covers[0].shape();
        let noise: Vec<f64> = (0..n * h * w).map(|_| self.rng.random::<f64>()).collect();

        let cover_raw = images_to_tensor(&covers, 1.0)?;
        let flu_raw = images_to_tensor(&flus, 1.0)?;
        let mut g = Graph::new();
        let x = g.constant(cover_raw.map(|v| v / 255.0));
        let p = match self.state.generator.forward(&mut g, x, Mode::Train) {
            Ok(p) => p,
            Err(GeneratorError::NonFinite { layer }) => {
                let detail = format!("generator activation after {layer}");
                let snapshot = self.snapshot(it, &covers, &detail);
                return Err(TrainError::NonFinite {
                    iteration: it,
                    detail,
                    snapshot,
                });
            }
            Err(e) => return Err(e.into()),
        };
        let cfg = &self.cfg;
        let st = &self.state;
        let s = simulate_stego(&mut g, &cover_raw, p, &noise, cfg.gamma);
        let c = g.constant(cover_raw.clone());
        let f = g.constant(flu_raw);

        let entropy = |g: &mut Graph, d: &Discriminator, genuine: Var| {
            let input = g.concat(&[genuine, s], 0);
            let probs = d.forward(g, input, Mode::Train);
            stacked_cross_entropy(g, probs, n)
        };
        // Losses driving each side: (e1, e2) for the log, the chosen
        // discriminator's loss and the generator's adversarial term.
        let (lp, d_loss, l_a) = match cfg.strategy {
            Strategy::Assignment => {
                let e1 = entropy(&mut g, &st.d1, c);
                let e2 = entropy(&mut g, &st.d2, f);
                let lp = LossPair {
                    e1: g.value(e1).item(),
                    e2: g.value(e2).item(),
                };
                let chosen = if choose(lp) == DiscriminatorId::D1 { e1 } else { e2 };
                let scaled = g.scale(e2, cfg.lambda);
                let l_a = g.add(e1, scaled);
                (lp, chosen, l_a)
            }
            Strategy::Shared => {
                let fs1 = entropy(&mut g, &st.d1, f);
                let cs1 = entropy(&mut g, &st.d1, c);
                let fs2 = entropy(&mut g, &st.d2, f);
                let cs2 = entropy(&mut g, &st.d2, c);
                let combine = |g: &mut Graph, fs: Var, cs: Var| {
                    let t = g.scale(cs, cfg.lambda_prime);
                    g.add(fs, t)
                };
                let l1 = combine(&mut g, fs1, cs1);
                let l2 = combine(&mut g, fs2, cs2);
                let vals = |v: Var| g.value(v).item();
                let shared = combine_shared([vals(fs1), vals(fs2)], [vals(cs1), vals(cs2)], cfg.lambda_prime)?;
                let lp = LossPair {
                    e1: shared.combined[0],
                    e2: shared.combined[1],
                };
                let (max, min) = if shared.updated == DiscriminatorId::D1 { (l1, l2) } else { (l2, l1) };
                (lp, max, min)
            }
        };
        let l_e = entropy_loss_var(&mut g, p, cfg.payload);
        let adv = g.scale(l_a, -cfg.alpha);
        let pay = g.scale(l_e, cfg.beta);
        let l_g = g.add(adv, pay);

        let caps: Vec<f64> = {
            let cv = capacity_var(&mut g, p);
            g.value(cv).data().to_vec()
        };
        let target = (h * w) as f64 * cfg.payload;
        let payload_dev = caps.iter().map(|c| (c - target).abs()).sum::<f64>() / n as f64;
        let values = [
            ("l_G", g.value(l_g).item()),
            ("l_a", g.value(l_a).item()),
            ("l_e", g.value(l_e).item()),
            ("e1", lp.e1),
            ("e2", lp.e2),
        ];
        if let Some((name, v)) = values.iter().find(|(_, v)| !v.is_finite()) {
            let detail = format!("{name} = {v}");
            let snapshot = self.snapshot(it, &covers, &detail);
            return Err(TrainError::NonFinite {
                iteration: it,
                detail,
                snapshot,
            });
        }

        let st = &mut self.state;
        let d_grads = {
            let grads = g.backward(d_loss, &[s]);
            let store = if choose(lp) == DiscriminatorId::D1 { &st.d1.store } else { &st.d2.store };
            grads.for_store(&g, store)
        };
        let g_grads = g.backward(l_g, &[]).for_store(&g, &st.generator.store);
        let mut scratch = UpdateLog::default();
        let which = assignment_update(lp, &mut st.d1, &mut st.d2, &d_grads, cfg.d_lr * lr_scale, it, &mut scratch);
        st.g_optimizer.step(&mut st.generator.store, &g_grads, cfg.lr * lr_scale);
        let updates = g.bn_updates();
        st.generator.store.apply_bn_updates(updates, cfg.bn_momentum);
        match which {
            DiscriminatorId::D1 => st.d1.store.apply_bn_updates(updates, cfg.bn_momentum),
            DiscriminatorId::D2 => st.d2.store.apply_bn_updates(updates, cfg.bn_momentum),
        }
        st.update_log.push(UpdateRecord {
            iteration: it,
            e1: lp.e1,
            e2: lp.e2,
            updated: which,
        });
        st.history.push(IterationRecord {
            iteration: it,
            l_g: values[0].1,
            l_a: values[1].1,
            l_e: values[2].1,
            e1: lp.e1,
            e2: lp.e2,
            payload_dev,
            lr: cfg.lr * lr_scale,
            updated: which,
            batch,
            flu_index,
        });
        st.iteration += 1;
        self.emit()?;
        Ok(self.state.history.last().expect("just pushed"))
    }

    /// Run until `cfg.iterations` iterations have completed.
    pub fn train(&mut self) -> Result<(), TrainError> {
        while self.state.iteration < self.cfg.iterations {
            let rec = self.step()?;
            if rec.iteration % 50 == 0 {
                log::info!(
                    "iter {} l_G {:.4} e1 {:.4} e2 {:.4} dev {:.1} updated {}",
                    rec.iteration,
                    rec.l_g,
                    rec.e1,
                    rec.e2,
                    rec.payload_dev,
                    rec.updated
                );
            }
        }
        if let Some(dir) = self.out_dir.clone() {
            self.save_checkpoint(&dir.join("final"))?;
        }
        Ok(())
    }

    fn emit(&self) -> Result<(), TrainError> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        let rec = self.state.history.last().expect("record");
        let path = dir.join("metrics.jsonl");
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        writeln!(f, "{}", serde_json::to_string(rec).expect("record serializes")).map_err(io_err(&path))?;
        let log_path = dir.join("updates.tsv");
        let from = self.state.update_log.len() - 1;
        self.state.update_log.append_to(&log_path, from)?;
        let every = self.cfg.checkpoint_every;
        if every > 0 && self.state.iteration % every == 0 {
            self.save_checkpoint(&dir.join(format!("ckpt_{:07}", self.state.iteration)))?;
        }
        Ok(())
    }

    /// Generator, both discriminators and the state summary under `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        self.state.generator.save(&dir.join("generator.ckpt"))?;
        self.state.d1.save(&dir.join("d1.ckpt"))?;
        self.state.d2.save(&dir.join("d2.ckpt"))?;
        let summary = serde_json::json!({
            "iteration": self.state.iteration,
            "config": self.cfg,
        });
        let path = dir.join("state.json");
        archive::write_atomic(&path, serde_json::to_string_pretty(&summary).expect("json").as_bytes())
            .map_err(io_err(&path))?;
        Ok(())
    }

    fn snapshot(&self, iteration: u64, covers: &[ImageGray], detail: &str) -> Option<PathBuf> {
        let dir = self.out_dir.as_ref()?.join(format!("nonfinite_{iteration:07}"));
        let write = || -> Result<(), TrainError> {
            self.save_checkpoint(&dir)?;
            for (k, c) in covers.iter().enumerate() {
                crate::image::save_image(c, &dir.join(format!("cover_{k}.pgm")))
                    .map_err(|e| TrainError::Config(e.to_string()))?;
            }
            let path = dir.join("reason.txt");
            fs::write(&path, detail).map_err(io_err(&path))
        };
        match write() {
            Ok(()) => Some(dir),
            Err(e) => {
                log::error!("could not write diagnostic snapshot: {e}");
                None
            }
        }
    }
}

/// Mean over `covers` of `|capacity − H·W·q|` with running statistics.
pub fn payload_deviation(generator: &Generator, covers: &[ImageGray], q: f64) -> Result<f64, TrainError> {
    let maps = generator.probability_maps(covers, Mode::Eval)?;
    Ok(maps
        .iter()
        .map(|m| {
            let (h, w) = m.shape();
            (capacity(m) - (h * w) as f64 * q).abs()
        })
        .sum::<f64>()
        / maps.len() as f64)
}

/// Mean over `covers` of the Spearman correlation between local 3×3
/// variance and the change probability.
pub fn texture_correlation(generator: &Generator, covers: &[ImageGray]) -> Result<f64, TrainError> {
    let maps = generator.probability_maps(covers, Mode::Eval)?;
    let mut total = 0.0;
    for (cover, map) in covers.iter().zip(&maps) {
        let (h, w) = cover.shape();
        let var = crate::stats::local_variance(&cover.to_f64(), h, w);
        total += crate::stats::spearman(&var, &map.total()).unwrap_or(0.0);
    }
    Ok(total / covers.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_loss_arithmetic() {
        let cfg = TrainConfig::default();
        assert_eq!(generator_loss(0.0, 0.0, 0.0, &cfg).0, 0.0);
        let (l_g, l_a) = generator_loss(0.3, 0.7, 0.0, &cfg);
        assert!((l_g + 1.0).abs() < 1e-15 && (l_a - 1.0).abs() < 1e-15);
        for lambda in [1.0, 2.0, 4.0, 8.0] {
            let cfg = TrainConfig { lambda, ..TrainConfig::default() };
            cfg.validate().unwrap();
            assert!((generator_loss(0.5, 0.25, 0.0, &cfg).1 - (0.5 + lambda * 0.25)).abs() < 1e-15);
        }
    }

    #[test]
    fn decay_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.decay_factor(0), 1.0);
        assert_eq!(cfg.decay_factor(4999), 1.0);
        assert!((cfg.decay_factor(5000) - 0.9).abs() < 1e-15);
        assert!((cfg.decay_factor(12_000) - 0.81).abs() < 1e-15);
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(TrainConfig::from_toml("payload = 1.5").is_err());
        assert!(TrainConfig::from_toml("alpha = 0.0").is_err());
        assert!(TrainConfig::from_toml("unknown_key = 1").is_err());
        let partial = TrainConfig::from_toml("iterations = 7\nstrategy = \"shared\"\n[generator]\nbase_channels = 8\n").unwrap();
        assert_eq!(partial.iterations, 7);
        assert_eq!(partial.strategy, Strategy::Shared);
        assert_eq!(partial.generator.base_channels, 8);
    }
}
