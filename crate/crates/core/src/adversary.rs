//! Steganalyzer discriminators and the strategies that decide which one
//! learns at each iteration.
//!
//! Discriminator 1 separates covers from stegos, discriminator 2 separates
//! fluctuation images from stegos. Under the assignment strategy only the
//! discriminator with the larger cross-entropy is updated; exact ties go to
//! discriminator 2.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use fluxsteg_nn::graph::Binding;
use fluxsteg_nn::{
    archive, Adam, AdamConfig, BatchNorm2d, Conv2d, Graph, Linear, Mode, ParamStore, Tensor, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generator::images_to_tensor;
use crate::image::ImageGray;

/// Probability floor inside the logarithms of the cross-entropies.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum AdversaryError {
    #[error("non-finite discriminator output in {0}")]
    NonFinite(DiscriminatorId),
    #[error("image batch: {0}")]
    Batch(String),
    #[error(transparent)]
    Archive(#[from] archive::ArchiveError),
    #[error("checkpoint metadata: {0}")]
    Meta(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid parameter: {0}")]
    Param(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiscriminatorId {
    D1,
    D2,
}

impl fmt::Display for DiscriminatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiscriminatorId::D1 => "D1",
            DiscriminatorId::D2 => "D2",
        })
    }
}

impl std::str::FromStr for DiscriminatorId {
    type Err = AdversaryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "D1" => Ok(DiscriminatorId::D1),
            "D2" => Ok(DiscriminatorId::D2),
            other => Err(AdversaryError::Param(format!("unknown discriminator {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Single fixed high-pass filter, absolute value and tanh early.
    Weak,
    /// Thirty fixed residual filters with truncation.
    Strong,
}

impl std::str::FromStr for Arch {
    type Err = AdversaryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "weak" => Ok(Arch::Weak),
            "strong" => Ok(Arch::Strong),
            other => Err(AdversaryError::Param(format!("unknown architecture {other:?}"))),
        }
    }
}

/// The 5×5 "KV" high-pass kernel.
pub fn kv_kernel() -> [f64; 25] {
    let k = [
        -1.0, 2.0, -2.0, 2.0, -1.0, //
        2.0, -6.0, 8.0, -6.0, 2.0, //
        -2.0, 8.0, -12.0, 8.0, -2.0, //
        2.0, -6.0, 8.0, -6.0, 2.0, //
        -1.0, 2.0, -2.0, 2.0, -1.0,
    ];
    k.map(|v| v / 12.0)
}

fn rotate90(k: &[f64; 25]) -> [f64; 25] {
    let mut out = [0.0; 25];
    for i in 0..5 {
        for j in 0..5 {
            out[j * 5 + (4 - i)] = k[i * 5 + j];
        }
    }
    out
}

/// Line kernel with taps `coefs` at offsets `start..` along `(dy, dx)`
/// from the centre, divided by `norm`.
fn line_kernel(coefs: &[f64], start: i32, dy: i32, dx: i32, norm: f64) -> [f64; 25] {
    let mut k = [0.0; 25];
    for (t, &c) in coefs.iter().enumerate() {
        let s = start + t as i32;
        let (y, x) = (2 + s * dy, 2 + s * dx);
        k[(y * 5 + x) as usize] += c / norm;
    }
    k
}

/// The thirty fixed residual kernels of the strong front end: 8 first
/// order, 4 second order, 8 third order, SQUARE 3×3, SQUARE 5×5, 4 EDGE
/// 3×3 and 4 EDGE 5×5.
pub fn srm_kernels() -> Vec<[f64; 25]> {
    const DIRS8: [(i32, i32); 8] = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)];
    let mut out = Vec::with_capacity(30);
    for &(dy, dx) in &DIRS8 {
        out.push(line_kernel(&[-1.0, 1.0], 0, dy, dx, 1.0));
    }
    for &(dy, dx) in &DIRS8[..4] {
        out.push(line_kernel(&[1.0, -2.0, 1.0], -1, dy, dx, 2.0));
    }
    for &(dy, dx) in &DIRS8 {
        out.push(line_kernel(&[1.0, -3.0, 3.0, -1.0], -1, dy, dx, 3.0));
    }
    let mut sq3 = [0.0; 25];
    let s3 = [-1.0, 2.0, -1.0, 2.0, -4.0, 2.0, -1.0, 2.0, -1.0];
    for i in 0..3 {
        for j in 0..3 {
            sq3[(i + 1) * 5 + j + 1] = s3[i * 3 + j] / 4.0;
        }
    }
    out.push(sq3);
    let kv = kv_kernel();
    out.push(kv);
    let mut edge3 = sq3;
    for v in &mut edge3[15..20] {
        *v = 0.0;
    }
    for _ in 0..4 {
        out.push(edge3);
        edge3 = rotate90(&edge3);
    }
    let mut edge5 = kv;
    for v in &mut edge5[15..25] {
        *v = 0.0;
    }
    for _ in 0..4 {
        out.push(edge5);
        edge5 = rotate90(&edge5);
    }
    out
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, 1, k / 2, false, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Binding, x: Var, mode: Mode) -> Var {
        let h = self.conv.forward(g, p, x);
        self.bn.forward(g, p, h, mode)
    }
}

#[derive(Debug, Clone)]
enum Net {
    Weak { groups: Vec<ConvBn>, head: Linear },
    Strong { groups: Vec<ConvBn>, head: Linear },
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub id: DiscriminatorId,
    pub arch: Arch,
    pub store: ParamStore,
    pub optimizer: Adam,
    front: Tensor,
    net: Net,
}

impl Discriminator {
    pub fn new(id: DiscriminatorId, arch: Arch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (front, net) = match arch {
            Arch::Weak => {
                let groups = vec![
                    ConvBn::new(&mut store, "g1", 1, 8, 5, &mut rng),
                    ConvBn::new(&mut store, "g2", 8, 16, 5, &mut rng),
                    ConvBn::new(&mut store, "g3", 16, 32, 1, &mut rng),
                    ConvBn::new(&mut store, "g4", 32, 64, 1, &mut rng),
                    ConvBn::new(&mut store, "g5", 64, 128, 1, &mut rng),
                ];
                let head = Linear::new(&mut store, "fc", 128, 2, &mut rng);
                (Tensor::new(&[1, 1, 5, 5], kv_kernel().to_vec()), Net::Weak { groups, head })
            }
            Arch::Strong => {
                let widths = [(30, 16), (16, 16), (16, 32), (32, 32), (32, 64)];
                let groups = widths
                    .iter()
                    .enumerate()
                    .map(|(i, &(a, b))| ConvBn::new(&mut store, &format!("c{}", i + 1), a, b, 3, &mut rng))
                    .collect();
                let head = Linear::new(&mut store, "fc", 64, 2, &mut rng);
                let bank: Vec<f64> = srm_kernels().iter().flatten().copied().collect();
                (Tensor::new(&[30, 1, 5, 5], bank), Net::Strong { groups, head })
            }
        };
        Self {
            id,
            arch,
            store,
            optimizer: Adam::new(AdamConfig::default()),
            front,
            net,
        }
    }

    /// Class probabilities `[N, 2]` for images `x` in gray levels
    /// `[0, 255]`; column 0 is the genuine class, column 1 stego.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Var {
        let p = g.bind(&self.store);
        let front = g.constant(self.front.clone());
        let r = g.conv2d(x, front, None, 1, 2);
        let logits = match &self.net {
            Net::Weak { groups, head } => {
                let mut h = groups[0].conv.forward(g, &p, r);
                h = g.abs(h);
                h = groups[0].bn.forward(g, &p, h, mode);
                h = g.tanh(h);
                h = g.avg_pool(h, 5, 2, 2);
                h = groups[1].forward(g, &p, h, mode);
                h = g.tanh(h);
                h = g.avg_pool(h, 5, 2, 2);
                for (k, group) in groups[2..].iter().enumerate() {
                    h = group.forward(g, &p, h, mode);
                    h = g.relu(h);
                    h = if k < 2 { g.avg_pool(h, 5, 2, 2) } else { g.global_avg_pool(h) };
                }
                head.forward(g, &p, h)
            }
            Net::Strong { groups, head } => {
                let mut h = g.clamp(r, -3.0, 3.0);
                for (k, group) in groups.iter().enumerate() {
                    h = group.forward(g, &p, h, mode);
                    h = g.relu(h);
                    if (1..=3).contains(&k) {
                        h = g.avg_pool(h, 5, 2, 2);
                    }
                }
                h = g.global_avg_pool(h);
                head.forward(g, &p, h)
            }
        };
        g.softmax(logits)
    }

    /// Probabilities for a batch of images with running statistics.
    pub fn predict(&self, images: &[ImageGray]) -> Result<Vec<[f64; 2]>, AdversaryError> {
        let x = images_to_tensor(images, 1.0).map_err(|e| AdversaryError::Batch(e.to_string()))?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = self.forward(&mut g, xv, Mode::Eval);
        let probs = g.value(out);
        if !probs.all_finite() {
            return Err(AdversaryError::NonFinite(self.id));
        }
        Ok(probs.data().chunks(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), AdversaryError> {
        let meta = serde_json::json!({"arch": "discriminator", "id": self.id, "kind": self.arch});
        Ok(archive::save(path, &meta, &self.store)?)
    }

    pub fn load(path: &Path) -> Result<Self, AdversaryError> {
        let a = archive::load(path)?;
        if a.meta.get("arch").and_then(|v| v.as_str()) != Some("discriminator") {
            return Err(AdversaryError::Meta("not a discriminator checkpoint".into()));
        }
        let id: DiscriminatorId =
            serde_json::from_value(a.meta["id"].clone()).map_err(|e| AdversaryError::Meta(e.to_string()))?;
        let arch: Arch =
            serde_json::from_value(a.meta["kind"].clone()).map_err(|e| AdversaryError::Meta(e.to_string()))?;
        let mut d = Self::new(id, arch, 0);
        a.load_into(&mut d.store)?;
        Ok(d)
    }
}

/// Cross-entropy of a discriminator output over a stacked batch whose
/// first `genuine` rows are the genuine class and the rest stego:
/// `mean(-ln p0 | genuine) + mean(-ln p1 | stego)`.
pub fn stacked_cross_entropy(g: &mut Graph, probs: Var, genuine: usize) -> Var {
    let n = g.shape(probs)[0];
    let stego = n - genuine;
    assert!(genuine > 0 && stego > 0, "both classes must be present");
    let mut weights = vec![0.0; n * 2];
    for (row, w) in weights.chunks_mut(2).enumerate() {
        if row < genuine {
            w[0] = -1.0 / genuine as f64;
        } else {
            w[1] = -1.0 / stego as f64;
        }
    }
    let floored = g.clamp(probs, PROB_EPS, 1.0);
    let logs = g.ln(floored);
    let w = g.constant(Tensor::new(&[n, 2], weights));
    let terms = g.mul(logs, w);
    g.sum(terms)
}

/// Scalar version over per-sample probability pairs.
pub fn cross_entropy(genuine: &[[f64; 2]], stego: &[[f64; 2]]) -> f64 {
    let term = |p: f64| -p.max(PROB_EPS).ln();
    genuine.iter().map(|p| term(p[0])).sum::<f64>() / genuine.len() as f64
        + stego.iter().map(|p| term(p[1])).sum::<f64>() / stego.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPair {
    pub e1: f64,
    pub e2: f64,
}

/// `e1` from D1 on (cover, stego) and `e2` from D2 on (fluctuation, stego),
/// both evaluated in training mode on the stacked batch.
pub fn cross_entropy_pair(
    d1: &Discriminator,
    d2: &Discriminator,
    cover: &[ImageGray],
    stego: &[ImageGray],
    flu: &[ImageGray],
) -> Result<LossPair, AdversaryError> {
    let e = |d: &Discriminator, genuine: &[ImageGray]| -> Result<f64, AdversaryError> {
        let all: Vec<ImageGray> = genuine.iter().chain(stego).cloned().collect();
        let x = images_to_tensor(&all, 1.0).map_err(|e| AdversaryError::Batch(e.to_string()))?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let probs = d.forward(&mut g, xv, Mode::Train);
        let loss = stacked_cross_entropy(&mut g, probs, genuine.len());
        let v = g.value(loss).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AdversaryError::NonFinite(d.id))
        }
    };
    if cover.len() != stego.len() || flu.len() != stego.len() || stego.is_empty() {
        return Err(AdversaryError::Batch("cover, stego and fluctuation batches must be equal and non-empty".into()));
    }
    Ok(LossPair {
        e1: e(d1, cover)?,
        e2: e(d2, flu)?,
    })
}

/// The discriminator to update: the one with the larger loss, D2 on ties.
pub fn choose(lp: LossPair) -> DiscriminatorId {
    if lp.e1 <= lp.e2 {
        DiscriminatorId::D2
    } else {
        DiscriminatorId::D1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub iteration: u64,
    pub e1: f64,
    pub e2: f64,
    pub updated: DiscriminatorId,
}

/// Append-only record of which discriminator learned at each iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateLog {
    pub records: Vec<UpdateRecord>,
}

impl UpdateLog {
    pub fn push(&mut self, record: UpdateRecord) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Tab-separated lines `iteration e1 e2 updated` after a header.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("iteration\te1\te2\tupdated\n");
        for r in &self.records {
            s.push_str(&format!("{}\t{:e}\t{:e}\t{}\n", r.iteration, r.e1, r.e2, r.updated));
        }
        s
    }

    pub fn parse_tsv(text: &str) -> Result<Self, AdversaryError> {
        let mut log = Self::default();
        for (n, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || AdversaryError::Param(format!("update log line {}: {line:?}", n + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            log.push(UpdateRecord {
                iteration: f[0].parse().map_err(|_| bad())?,
                e1: f[1].parse().map_err(|_| bad())?,
                e2: f[2].parse().map_err(|_| bad())?,
                updated: f[3].parse()?,
            });
        }
        Ok(log)
    }

    pub fn append_to(&self, path: &Path, from: usize) -> Result<(), AdversaryError> {
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            f.write_all(b"iteration\te1\te2\tupdated\n")?;
        }
        for r in &self.records[from..] {
            writeln!(f, "{}\t{:e}\t{:e}\t{}", r.iteration, r.e1, r.e2, r.updated)?;
        }
        Ok(())
    }

    /// True when every record chose according to [`choose`].
    pub fn consistent(&self) -> bool {
        self.records.iter().all(|r| choose(LossPair { e1: r.e1, e2: r.e2 }) == r.updated)
    }
}

/// Update the discriminator chosen from `lp` with its gradients and log the
/// choice. The other discriminator is left untouched.
pub fn assignment_update(
    lp: LossPair,
    d1: &mut Discriminator,
    d2: &mut Discriminator,
    grads: &[Option<Tensor>],
    lr: f64,
    iteration: u64,
    log: &mut UpdateLog,
) -> DiscriminatorId {
    let which = choose(lp);
    let d = match which {
        DiscriminatorId::D1 => d1,
        DiscriminatorId::D2 => d2,
    };
    d.optimizer.step(&mut d.store, grads, lr);
    log.push(UpdateRecord {
        iteration,
        e1: lp.e1,
        e2: lp.e2,
        updated: which,
    });
    which
}

/// Losses of the shared-task strategy, where each discriminator sees both
/// tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharedLosses {
    /// `E_i(F, S) + λ' E_i(C, S)` for i = 1, 2.
    pub combined: [f64; 2],
    pub l_d: f64,
    pub l_a: f64,
    pub updated: DiscriminatorId,
}

/// Combine per-discriminator task losses `e_fs[i] = E_i(F, S)` and
/// `e_cs[i] = E_i(C, S)`.
pub fn combine_shared(e_fs: [f64; 2], e_cs: [f64; 2], lambda_prime: f64) -> Result<SharedLosses, AdversaryError> {
    if !(lambda_prime > 0.0) {
        return Err(AdversaryError::Param(format!("lambda_prime must be positive, got {lambda_prime}")));
    }
    let combined = [e_fs[0] + lambda_prime * e_cs[0], e_fs[1] + lambda_prime * e_cs[1]];
    let updated = choose(LossPair {
        e1: combined[0],
        e2: combined[1],
    });
    Ok(SharedLosses {
        combined,
        l_d: combined[0].max(combined[1]),
        l_a: combined[0].min(combined[1]),
        updated,
    })
}

pub fn shared_task_losses(
    d1: &Discriminator,
    d2: &Discriminator,
    cover: &[ImageGray],
    stego: &[ImageGray],
    flu: &[ImageGray],
    lambda_prime: f64,
) -> Result<SharedLosses, AdversaryError> {
    let cs = cross_entropy_pair(d1, d2, cover, stego, cover)?;
    let fs = cross_entropy_pair(d1, d2, flu, stego, flu)?;
    combine_shared([fs.e1, fs.e2], [cs.e1, cs.e2], lambda_prime)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn srm_bank_is_thirty_zero_sum_kernels() {
        let bank = srm_kernels();
        assert_eq!(bank.len(), 30);
        for k in &bank {
            assert!(k.iter().sum::<f64>().abs() < 1e-12);
            assert!(k.iter().any(|&v| v != 0.0));
        }
        for i in 0..30 {
            for j in 0..i {
                assert_ne!(bank[i], bank[j], "kernels {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn choice_rule() {
        assert_eq!(choose(LossPair { e1: 0.5, e2: 0.9 }), DiscriminatorId::D2);
        assert_eq!(choose(LossPair { e1: 0.9, e2: 0.5 }), DiscriminatorId::D1);
        assert_eq!(choose(LossPair { e1: 0.7, e2: 0.7 }), DiscriminatorId::D2);
    }

    #[test]
    fn shared_arithmetic_tie() {
        let s = combine_shared([0.2, 0.4], [0.3, 0.1], 1.0).unwrap();
        assert!((s.combined[0] - 0.5).abs() < 1e-15 && (s.combined[1] - 0.5).abs() < 1e-15);
        assert_eq!(s.l_d, s.l_a);
        assert!(combine_shared([0.0; 2], [0.0; 2], 0.0).is_err());
    }

    #[test]
    fn update_log_tsv_round_trip() {
        let mut log = UpdateLog::default();
        log.push(UpdateRecord { iteration: 0, e1: 0.25, e2: 1.5, updated: DiscriminatorId::D2 });
        log.push(UpdateRecord { iteration: 1, e1: 2.0, e2: 1.0, updated: DiscriminatorId::D1 });
        assert_eq!(UpdateLog::parse_tsv(&log.to_tsv()).unwrap(), log);
        assert!(log.consistent());
    }
}
