//! Detectability of stego images: steganalyzer training, detection error
//! and baseline cost schemes.

use std::fmt::Write as _;

use fluxsteg_nn::{Graph, Mode};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{stacked_cross_entropy, AdversaryError, Arch, Discriminator, DiscriminatorId};
use crate::embedding::{stc_embed, CostMap, EmbedError, StcParams, WET_COST};
use crate::generator::images_to_tensor;
use crate::image::ImageGray;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no samples to evaluate")]
    Empty,
    #[error("labels and predictions differ in length: {0} vs {1}")]
    Length(usize, usize),
    #[error("evaluation needs both classes; only {0} present")]
    SingleClass(&'static str),
    #[error("degenerate split: {0}")]
    Split(String),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Detection rates; `true` labels stego.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub payload: f64,
    pub p_fa: f64,
    pub p_md: f64,
    pub p_e: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

/// False-alarm rate over covers, missed-detection rate over stegos and
/// their mean.
pub fn compute_pe(labels: &[bool], predictions: &[bool]) -> Result<EvalReport, EvalError> {
    if labels.len() != predictions.len() {
        return Err(EvalError::Length(labels.len(), predictions.len()));
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut covers, mut stegos, mut fa, mut md) = (0usize, 0usize, 0usize, 0usize);
    for (&l, &p) in labels.iter().zip(predictions) {
        if l {
            stegos += 1;
            md += usize::from(!p);
        } else {
            covers += 1;
            fa += usize::from(p);
        }
    }
    if covers == 0 {
        return Err(EvalError::SingleClass("stego"));
    }
    if stegos == 0 {
        return Err(EvalError::SingleClass("cover"));
    }
    let p_fa = fa as f64 / covers as f64;
    let p_md = md as f64 / stegos as f64;
    Ok(EvalReport {
        method: String::new(),
        payload: 0.0,
        p_fa,
        p_md,
        p_e: (p_fa + p_md) / 2.0,
        n_train: 0,
        n_val: 0,
        n_test: labels.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineScheme {
    Uniform,
    HillLike,
}

impl std::str::FromStr for BaselineScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "hill_like" | "hill-like" => Ok(Self::HillLike),
            other => Err(format!("unknown baseline {other:?}")),
        }
    }
}

fn box_filter(x: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let r = radius as i64;
    let mut out = vec![0.0; x.len()];
    for i in 0..h as i64 {
        for j in 0..w as i64 {
            let mut s = 0.0;
            for di in -r..=r {
                for dj in -r..=r {
                    // Symmetric extension at the borders.
                    let y = reflect(i + di, h);
                    let xx = reflect(j + dj, w);
                    s += x[y * w + xx];
                }
            }
            out[i as usize * w + j as usize] = s / ((2 * r + 1) * (2 * r + 1)) as f64;
        }
    }
    out
}

fn reflect(k: i64, n: usize) -> usize {
    let n = n as i64;
    let mut k = k;
    while k < 0 || k >= n {
        k = if k < 0 { -k - 1 } else { 2 * n - k - 1 };
    }
    k as usize
}

/// Constant costs, or costs inversely proportional to smoothed high-pass
/// activity (high in flat regions).
pub fn baseline_costs(cover: &ImageGray, scheme: BaselineScheme) -> CostMap {
    let (h, w) = cover.shape();
    match scheme {
        BaselineScheme::Uniform => CostMap::constant(h, w, 1.0),
        BaselineScheme::HillLike => {
            let x = cover.to_f64();
            const KB: [[f64; 3]; 3] = [[-1.0, 2.0, -1.0], [2.0, -4.0, 2.0], [-1.0, 2.0, -1.0]];
            let mut r = vec![0.0; h * w];
            for i in 0..h as i64 {
                for j in 0..w as i64 {
                    let mut s = 0.0;
                    for (di, row) in KB.iter().enumerate() {
                        for (dj, k) in row.iter().enumerate() {
                            s += k * x[reflect(i + di as i64 - 1, h) * w + reflect(j + dj as i64 - 1, w)];
                        }
                    }
                    r[i as usize * w + j as usize] = s.abs();
                }
            }
            let activity = box_filter(&r, h, w, 1);
            let inv: Vec<f64> = activity.iter().map(|&a| (1.0 / (a + 1e-10)).min(WET_COST)).collect();
            let rho = box_filter(&inv, h, w, 7);
            CostMap::symmetric(h, w, rho).expect("finite costs")
        }
    }
}

/// Embed a random message filling the capacity at `params.payload_q`.
pub fn embed_random(cover: &ImageGray, costs: &CostMap, params: &StcParams, seed: u64) -> Result<ImageGray, EvalError> {
    let bits = params.capacity_bits(cover.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let msg: Vec<u8> = (0..bits).map(|_| rng.random_range(0..=1u8)).collect();
    Ok(stc_embed(cover, costs, &msg, params)?)
}

/// Cover/stego pairs of one split.
#[derive(Debug, Clone, Default)]
pub struct PairSet {
    pub covers: Vec<ImageGray>,
    pub stegos: Vec<ImageGray>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.covers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covers.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteganalyzerConfig {
    pub arch: Arch,
    pub epochs: usize,
    /// Pairs per batch; each batch holds the covers and their stegos.
    pub batch_pairs: usize,
    pub lr: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for SteganalyzerConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Weak,
            epochs: 30,
            batch_pairs: 8,
            lr: 1e-3,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

/// Stego decisions (`p(stego) > 0.5`) for a list of images.
pub fn classify(d: &Discriminator, images: &[ImageGray]) -> Result<Vec<bool>, EvalError> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        out.extend(d.predict(chunk)?.iter().map(|p| p[1] > 0.5));
    }
    Ok(out)
}

/// Detection error of `d` on a pair set.
pub fn evaluate(d: &Discriminator, pairs: &PairSet) -> Result<EvalReport, EvalError> {
    let images: Vec<ImageGray> = pairs.covers.iter().chain(&pairs.stegos).cloned().collect();
    let labels: Vec<bool> = (0..images.len()).map(|k| k >= pairs.covers.len()).collect();
    compute_pe(&labels, &classify(d, &images)?)
}

/// Train a steganalyzer from scratch, keep the epoch with the lowest
/// validation error and report on the test pairs.
pub fn train_steganalyzer(
    train: &PairSet,
    val: &PairSet,
    test: &PairSet,
    cfg: &SteganalyzerConfig,
) -> Result<(Discriminator, EvalReport), EvalError> {
    for (name, s) in [("train", train), ("val", val), ("test", test)] {
        if s.is_empty() || s.covers.len() != s.stegos.len() {
            return Err(EvalError::Split(format!("{name} split needs equal, non-empty cover and stego lists")));
        }
    }
    if cfg.batch_pairs == 0 || cfg.epochs == 0 {
        return Err(EvalError::Split("batch_pairs and epochs must be positive".into()));
    }
    let mut d = Discriminator::new(DiscriminatorId::D1, cfg.arch, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut best: Option<(f64, Discriminator)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_pairs) {
            let batch: Vec<ImageGray> = chunk
                .iter()
                .map(|&k| train.covers[k].clone())
                .chain(chunk.iter().map(|&k| train.stegos[k].clone()))
                .collect();
            let mut g = Graph::new();
            let x = g.constant(images_to_tensor(&batch, 1.0).map_err(|e| EvalError::Split(e.to_string()))?);
            let probs = d.forward(&mut g, x, Mode::Train);
            let loss = stacked_cross_entropy(&mut g, probs, chunk.len());
            if !g.value(loss).item().is_finite() {
                return Err(AdversaryError::NonFinite(d.id).into());
            }
            let grads = g.backward(loss, &[]).for_store(&g, &d.store);
            d.optimizer.step(&mut d.store, &grads, cfg.lr);
            d.store.apply_bn_updates(g.bn_updates(), cfg.bn_momentum);
        }
        let v = evaluate(&d, val)?.p_e;
        log::debug!("steganalyzer epoch {epoch}: val p_e {v:.4}");
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, d.clone()));
        }
    }
    let (_, model) = best.expect("at least one epoch");
    let mut report = evaluate(&model, test)?;
    report.n_train = train.len() * 2;
    report.n_val = val.len() * 2;
    Ok((model, report))
}

/// Method × payload table of detection errors in percent.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut payloads: Vec<f64> = reports.iter().map(|r| r.payload).collect();
    payloads.sort_by(f64::total_cmp);
    payloads.dedup();
    let mut methods: Vec<&str> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let width = methods.iter().map(|m| m.len()).max().unwrap_or(6).max(6);
    let mut s = String::new();
    let _ = write!(s, "{:<width$}", "method");
    for q in &payloads {
        let _ = write!(s, "  {:>8}", format!("{q:.1} bpp"));
    }
    s.push('\n');
    for m in methods {
        let _ = write!(s, "{m:<width$}");
        for q in &payloads {
            let cell: Vec<f64> = reports
                .iter()
                .filter(|r| r.method == m && r.payload == *q)
                .map(|r| r.p_e)
                .collect();
            if cell.is_empty() {
                let _ = write!(s, "  {:>8}", "-");
            } else {
                let mean = cell.iter().sum::<f64>() / cell.len() as f64;
                let _ = write!(s, "  {:>8}", format!("{:.2}", mean * 100.0));
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pe_arithmetic() {
        // 5 covers with 1 false alarm (0.2), 5 stegos with 2 misses (0.4).
        let labels = [false, false, false, false, false, true, true, true, true, true];
        let preds = [true, false, false, false, false, false, false, true, true, true];
        let r = compute_pe(&labels, &preds).unwrap();
        assert!((r.p_fa - 0.2).abs() < 1e-15 && (r.p_md - 0.4).abs() < 1e-15);
        assert!((r.p_e - 0.3).abs() < 1e-15);
    }

    #[test]
    fn pe_errors() {
        assert!(matches!(compute_pe(&[], &[]), Err(EvalError::Empty)));
        assert!(matches!(compute_pe(&[true, true], &[true, false]), Err(EvalError::SingleClass(_))));
        assert!(matches!(compute_pe(&[true], &[]), Err(EvalError::Length(1, 0))));
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(5, 4), 2);
    }

    #[test]
    fn table_layout() {
        let mk = |method: &str, payload, p_e| EvalReport {
            method: method.into(),
            payload,
            p_fa: 0.0,
            p_md: 0.0,
            p_e,
            n_train: 0,
            n_val: 0,
            n_test: 0,
        };
        let t = render_table(&[mk("uniform", 0.4, 0.1), mk("learned", 0.4, 0.3), mk("learned", 0.1, 0.45)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("0.1 bpp") && lines[0].contains("0.4 bpp"));
        assert!(lines[1].starts_with("uniform") && lines[1].ends_with("10.00"));
        assert!(lines[2].contains("45.00") && lines[2].ends_with("30.00"));
    }
}
