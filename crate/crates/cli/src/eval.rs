use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use fluxsteg_core::adversary::Arch;
use fluxsteg_core::dataset::DatasetManifest;
use fluxsteg_core::embedding::{probs_to_costs, StcParams};
use fluxsteg_core::evaluation::{
    baseline_costs, embed_random, render_table, train_steganalyzer, BaselineScheme, EvalReport, PairSet,
    SteganalyzerConfig,
};
use fluxsteg_core::generator::Generator;
use fluxsteg_core::image::ImageGray;
use serde::Serialize;

use crate::run::{check_payloads, payload_label, write_atomic, RunRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Costs from `--generator`.
    Learned,
    Uniform,
    Hill,
    /// Stegos identical to covers; the chance-level reference.
    None,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "uniform")]
    pub methods: Vec<Method>,
    /// Generator checkpoint for `learned`; `{q}` is replaced by the
    /// payload's directory label, e.g. `runs/{q}/final/generator.ckpt`.
    #[arg(long, env = "FLUXSTEG_GENERATOR")]
    pub generator: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.4")]
    pub payload: Vec<f64>,
    #[arg(long, default_value_t = 7)]
    pub h: usize,
    /// Steganalyzer architecture: `weak` or `strong`.
    #[arg(long, default_value = "weak")]
    pub arch: String,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_pairs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, env = "FLUXSTEG_SEED", default_value_t = 0)]
    pub seed: u64,
    /// JSON list of reports.
    #[arg(long)]
    pub out: PathBuf,
}

fn load_covers(path: &Path) -> Result<Vec<ImageGray>> {
    let m = DatasetManifest::load(path)?;
    if m.is_empty() {
        bail!("manifest {} is empty", path.display());
    }
    Ok(m.load_covers()?)
}

fn stegos(
    covers: &[ImageGray],
    method: Method,
    generator: Option<&Generator>,
    params: &StcParams,
    seed: u64,
) -> Result<Vec<ImageGray>> {
    covers
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let costs = match method {
                Method::None => return Ok(c.clone()),
                Method::Uniform => baseline_costs(c, BaselineScheme::Uniform),
                Method::Hill => baseline_costs(c, BaselineScheme::HillLike),
                Method::Learned => probs_to_costs(&generator.expect("loaded").probability_map(c)?)?,
            };
            Ok(embed_random(c, &costs, params, seed.wrapping_mul(1_000_003).wrapping_add(k as u64))?)
        })
        .collect()
}

pub fn run(a: EvalArgs) -> Result<()> {
    check_payloads(&a.payload)?;
    let arch: Arch = a.arch.parse().map_err(anyhow::Error::msg)?;
    if a.methods.contains(&Method::Learned) && a.generator.is_none() {
        bail!("method `learned` needs --generator");
    }
    let mut record = RunRecord::new("eval", &a).seed(a.seed);
    let splits = [&a.train, &a.val, &a.test];
    let covers = splits.map(|p| load_covers(p));
    let [train_c, val_c, test_c] = covers;
    let (train_c, val_c, test_c) = (train_c?, val_c?, test_c?);
    for p in splits {
        record.input(p);
    }
    let cfg = SteganalyzerConfig {
        arch,
        epochs: a.epochs,
        batch_pairs: a.batch_pairs,
        lr: a.lr,
        seed: a.seed,
        ..SteganalyzerConfig::default()
    };
    let mut reports: Vec<EvalReport> = Vec::new();
    for &q in &a.payload {
        let params = StcParams { key: a.seed, ..StcParams::new(a.h, q) };
        let generator = match (&a.generator, a.methods.contains(&Method::Learned)) {
            (Some(t), true) => {
                let path = PathBuf::from(t.replace("{q}", &payload_label(q)));
                let g = Generator::load(&path).with_context(|| format!("loading generator {}", path.display()))?;
                record.input(&path);
                Some(g)
            }
            _ => None,
        };
        for &method in &a.methods {
            let pairs = |c: &[ImageGray], salt: u64| -> Result<PairSet> {
                Ok(PairSet {
                    covers: c.to_vec(),
                    stegos: stegos(c, method, generator.as_ref(), &params, a.seed ^ salt)?,
                })
            };
            let (_, mut rep) = train_steganalyzer(&pairs(&train_c, 1)?, &pairs(&val_c, 2)?, &pairs(&test_c, 3)?, &cfg)?;
            rep.method = format!("{method:?}").to_lowercase();
            rep.payload = q;
            log::info!("{} at {q} bpp: p_e {:.4} (fa {:.4}, md {:.4})", rep.method, rep.p_e, rep.p_fa, rep.p_md);
            reports.push(rep);
        }
    }
    write_atomic(&a.out, serde_json::to_string_pretty(&reports)?.as_bytes())?;
    record.output(&a.out);
    print!("{}", render_table(&reports));
    record.write(&crate::run::sidecar(&a.out))
}
