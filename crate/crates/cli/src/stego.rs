use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use fluxsteg_core::dataset::{DatasetManifest, FluctuationSet};
use fluxsteg_core::embedding::stc::{byte_capacity, embed_bytes, extract_bytes};
use fluxsteg_core::embedding::{probs_to_costs, CostMap, StcParams};
use fluxsteg_core::evaluation::{baseline_costs, BaselineScheme};
use fluxsteg_core::generator::Generator;
use fluxsteg_core::image::{load_image, save_image};
use fluxsteg_core::volatility::{combine_costs, estimate_volatility_cost, CombineConfig};
use serde::Serialize;

use crate::run::{sidecar, RunRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CostSource {
    /// A trained generator checkpoint (`--generator`).
    Learned,
    Uniform,
    /// Smoothed inverse high-pass activity.
    Hill,
}

#[derive(Debug, Args, Serialize)]
pub struct CostsArgs {
    #[arg(long)]
    pub cover: PathBuf,
    #[arg(long, value_enum, default_value = "learned")]
    pub source: CostSource,
    /// Generator checkpoint, e.g. `run/final/generator.ckpt`.
    #[arg(long, env = "FLUXSTEG_GENERATOR")]
    pub generator: Option<PathBuf>,
    /// Cost grid to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the probability map.
    #[arg(long)]
    pub probs_out: Option<PathBuf>,
}

pub fn costs(a: CostsArgs) -> Result<()> {
    let mut record = RunRecord::new("costs", &a);
    let cover = load_image(&a.cover)?;
    record.input(&a.cover);
    let costs = match a.source {
        CostSource::Learned => {
            let path = a.generator.as_ref().context("--generator is required for learned costs")?;
            let g = Generator::load(path).with_context(|| format!("loading generator {}", path.display()))?;
            record.input(path);
            let p = g.probability_map(&cover)?;
            if let Some(pp) = &a.probs_out {
                p.save(pp)?;
                record.output(pp);
            }
            probs_to_costs(&p)?
        }
        CostSource::Uniform => baseline_costs(&cover, BaselineScheme::Uniform),
        CostSource::Hill => baseline_costs(&cover, BaselineScheme::HillLike),
    };
    costs.save(&a.out)?;
    record.output(&a.out);
    log::info!("{} wet pixels of {}", costs.wet_count(), costs.len());
    record.write(&sidecar(&a.out))
}

#[derive(Debug, Args, Serialize)]
pub struct CodecArgs {
    /// Capacity in bits per pixel reserved for the message.
    #[arg(long, default_value_t = 0.4)]
    pub payload: f64,
    /// Constraint height of the trellis code.
    #[arg(long, default_value_t = 7)]
    pub h: usize,
    /// Shared key seeding the pixel permutation.
    #[arg(long, env = "FLUXSTEG_KEY", default_value_t = 0, hide_env_values = true)]
    #[serde(skip)]
    pub key: u64,
}

impl CodecArgs {
    fn params(&self) -> Result<StcParams> {
        let p = StcParams { h: self.h, payload_q: self.payload, key: self.key };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EmbedArgs {
    #[arg(long)]
    pub cover: PathBuf,
    #[arg(long)]
    pub costs: PathBuf,
    /// Message file (raw bytes).
    #[arg(long, conflicts_with = "hex", required_unless_present = "hex")]
    pub message: Option<PathBuf>,
    /// Message as hex digits.
    #[arg(long)]
    #[serde(skip)]
    pub hex: Option<String>,
    #[command(flatten)]
    pub codec: CodecArgs,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn embed(a: EmbedArgs) -> Result<()> {
    let mut record = RunRecord::new("embed", &a);
    let cover = load_image(&a.cover)?;
    let costs = CostMap::load(&a.costs).with_context(|| format!("loading costs {}", a.costs.display()))?;
    if costs.shape() != cover.shape() {
        bail!("cost map is {:?} but cover is {:?}", costs.shape(), cover.shape());
    }
    let message = match (&a.message, &a.hex) {
        (Some(p), _) => {
            record.input(p);
            fs::read(p).with_context(|| format!("reading message {}", p.display()))?
        }
        (None, Some(h)) => hex::decode(h.trim()).context("--hex is not valid hex")?,
        (None, None) => unreachable!("clap requires one message source"),
    };
    let params = a.codec.params()?;
    let cap = byte_capacity(cover.len(), &params);
    if message.len() > cap {
        bail!(
            "message of {} bytes exceeds the {cap}-byte capacity at {} bpp; raise --payload or use a larger cover",
            message.len(),
            params.payload_q
        );
    }
    let stego = embed_bytes(&cover, &costs, &message, &params)?;
    let changed = cover.pixels().iter().zip(stego.pixels()).filter(|(a, b)| a != b).count();
    log::info!("{} bytes embedded, {changed} pixels changed", message.len());
    save_image(&stego, &a.out)?;
    record.input(&a.cover);
    record.input(&a.costs);
    record.output(&a.out);
    record.write(&sidecar(&a.out))
}

#[derive(Debug, Args, Serialize)]
pub struct ExtractArgs {
    #[arg(long)]
    pub stego: PathBuf,
    #[command(flatten)]
    pub codec: CodecArgs,
    /// Message file to write; hex goes to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn extract(a: ExtractArgs) -> Result<()> {
    let mut record = RunRecord::new("extract", &a);
    let stego = load_image(&a.stego)?;
    let message = extract_bytes(&stego, &a.codec.params()?)?;
    record.input(&a.stego);
    match &a.out {
        Some(p) => {
            fs::write(p, &message).with_context(|| format!("writing {}", p.display()))?;
            record.output(p);
            record.write(&sidecar(p))
        }
        None => {
            println!("{}", hex::encode(&message));
            Ok(())
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct CombineArgs {
    /// Original cost grid.
    #[arg(long)]
    pub costs: PathBuf,
    /// Manifest holding the cover's fluctuation stack.
    #[arg(long, conflicts_with_all = ["cover", "fluctuation"])]
    pub manifest: Option<PathBuf>,
    /// Entry of `--manifest` to use.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Cover image, when the stack is given as files.
    #[arg(long, requires = "fluctuation")]
    pub cover: Option<PathBuf>,
    /// Fluctuation image; repeat for each.
    #[arg(long)]
    pub fluctuation: Vec<PathBuf>,
    /// Weight of the volatility cost.
    #[arg(long, default_value_t = fluxsteg_core::volatility::DEFAULT_VC_BETA)]
    pub vc_beta: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the volatility cost grid.
    #[arg(long)]
    pub volatility_out: Option<PathBuf>,
}

fn stack_from_files(cover: &Path, flus: &[PathBuf]) -> Result<FluctuationSet> {
    let cover_img = load_image(cover)?;
    let fluctuations = flus.iter().map(|p| load_image(p)).collect::<Result<Vec<_>, _>>()?;
    Ok(FluctuationSet {
        cover: cover_img,
        cfg_values: Vec::new(),
        prompt: String::new(),
        seed: 0,
        tau: f64::INFINITY,
        rejected_cfgs: Vec::new(),
        fluctuations,
    })
}

pub fn combine(a: CombineArgs) -> Result<()> {
    let mut record = RunRecord::new("combine", &a);
    let set = match (&a.manifest, &a.cover) {
        (Some(m), _) => {
            let manifest = DatasetManifest::load(m)?;
            if a.index >= manifest.len() {
                bail!("--index {} out of range; manifest has {} entries", a.index, manifest.len());
            }
            record.input(m);
            manifest.load_set(a.index)?
        }
        (None, Some(c)) => {
            record.input(c);
            for f in &a.fluctuation {
                record.input(f);
            }
            stack_from_files(c, &a.fluctuation)?
        }
        (None, None) => bail!("give either --manifest or --cover with --fluctuation files"),
    };
    let original = CostMap::load(&a.costs).with_context(|| format!("loading costs {}", a.costs.display()))?;
    record.input(&a.costs);
    let vol = estimate_volatility_cost(&set)?;
    let (combined, alpha) = combine_costs(&original, &vol.costs, &CombineConfig { vc_beta: a.vc_beta })?;
    log::info!("vc_alpha {alpha:.6}, {} wet pixels", combined.wet_count());
    if let Some(v) = &a.volatility_out {
        vol.costs.save(v)?;
        record.output(v);
    }
    combined.save(&a.out)?;
    record.output(&a.out);
    record.write(&sidecar(&a.out))
}
