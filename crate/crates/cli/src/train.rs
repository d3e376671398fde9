use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use fluxsteg_core::dataset::DatasetManifest;
use fluxsteg_core::training::{TrainConfig, Trainer};
use serde::Serialize;
use serde_json::{Map, Value};

use crate::run::{check_payloads, payload_label, RunRecord};

/// Flags override the config file; each also reads `FLUXSTEG_<NAME>`.
#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Training manifest.
    #[arg(long, env = "FLUXSTEG_MANIFEST")]
    pub manifest: PathBuf,
    /// TOML file with any subset of the training keys.
    #[arg(long, env = "FLUXSTEG_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// One run per payload (bpp); several payloads go to `q<payload>/` subdirectories.
    #[arg(long, value_delimiter = ',', env = "FLUXSTEG_PAYLOAD")]
    pub payload: Vec<f64>,
    #[arg(long, env = "FLUXSTEG_ITERATIONS")]
    pub iterations: Option<u64>,
    #[arg(long, env = "FLUXSTEG_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    #[arg(long, env = "FLUXSTEG_LR")]
    pub lr: Option<f64>,
    #[arg(long, env = "FLUXSTEG_D_LR")]
    pub d_lr: Option<f64>,
    #[arg(long, env = "FLUXSTEG_ALPHA")]
    pub alpha: Option<f64>,
    #[arg(long, env = "FLUXSTEG_BETA")]
    pub beta: Option<f64>,
    #[arg(long, env = "FLUXSTEG_LAMBDA")]
    pub lambda: Option<f64>,
    #[arg(long, env = "FLUXSTEG_GAMMA")]
    pub gamma: Option<f64>,
    /// `assignment` or `shared`.
    #[arg(long, env = "FLUXSTEG_STRATEGY")]
    pub strategy: Option<String>,
    #[arg(long, env = "FLUXSTEG_LAMBDA_PRIME")]
    pub lambda_prime: Option<f64>,
    /// `weak` or `strong`.
    #[arg(long, env = "FLUXSTEG_D1_ARCH")]
    pub d1_arch: Option<String>,
    #[arg(long, env = "FLUXSTEG_D2_ARCH")]
    pub d2_arch: Option<String>,
    #[arg(long, env = "FLUXSTEG_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "FLUXSTEG_CHECKPOINT_EVERY")]
    pub checkpoint_every: Option<u64>,
    /// Print the effective config as TOML and exit.
    #[arg(long)]
    pub print_config: bool,
}

impl TrainArgs {
    fn overrides(&self) -> Map<String, Value> {
        let mut m = Map::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("iterations", self.iterations.map(Value::from));
        put("batch_size", self.batch_size.map(Value::from));
        put("lr", self.lr.map(Value::from));
        put("d_lr", self.d_lr.map(Value::from));
        put("alpha", self.alpha.map(Value::from));
        put("beta", self.beta.map(Value::from));
        put("lambda", self.lambda.map(Value::from));
        put("gamma", self.gamma.map(Value::from));
        put("strategy", self.strategy.clone().map(Value::from));
        put("lambda_prime", self.lambda_prime.map(Value::from));
        put("d1_arch", self.d1_arch.clone().map(Value::from));
        put("d2_arch", self.d2_arch.clone().map(Value::from));
        put("seed", self.seed.map(Value::from));
        put("checkpoint_every", self.checkpoint_every.map(Value::from));
        m
    }
}

/// Defaults, then the config file, then flags and environment.
pub fn resolve(args: &TrainArgs) -> Result<TrainConfig> {
    let base = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            TrainConfig::from_toml(&text).with_context(|| format!("in config {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    let mut value = serde_json::to_value(&base).expect("config serializes");
    let obj = value.as_object_mut().expect("config is a table");
    for (k, v) in args.overrides() {
        obj.insert(k, v);
    }
    let cfg: TrainConfig = serde_json::from_value(value).context("invalid flag value")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(args: TrainArgs) -> Result<()> {
    let base = resolve(&args)?;
    let payloads = if args.payload.is_empty() { vec![base.payload] } else { args.payload.clone() };
    check_payloads(&payloads)?;
    if args.print_config {
        for &q in &payloads {
            print!("{}", TrainConfig { payload: q, ..base.clone() }.to_toml());
        }
        return Ok(());
    }
    let manifest = DatasetManifest::load(&args.manifest)?;
    let sets = manifest.load_sets()?;
    if sets.len() < base.batch_size {
        bail!(
            "manifest {} holds {} sets but batch_size is {}; lower --batch-size or add data",
            args.manifest.display(),
            sets.len(),
            base.batch_size
        );
    }
    for &q in &payloads {
        let cfg = TrainConfig { payload: q, ..base.clone() };
        let dir = if payloads.len() == 1 { args.out.clone() } else { args.out.join(payload_label(q)) };
        let mut record = RunRecord::new("train", &cfg).seed(cfg.seed);
        record.input(&args.manifest);
        if let Some(c) = &args.config {
            record.input(c);
        }
        let mut trainer = Trainer::new(cfg.clone(), sets.clone())?.with_output(&dir)?;
        trainer.train()?;
        let last = trainer.state.history.last().context("no iterations ran")?;
        log::info!(
            "q={q}: {} iterations, final l_G {:.4}, payload deviation {:.1} bits",
            last.iteration + 1,
            last.l_g,
            last.payload_dev
        );
        record.output(&dir.join("final"));
        record.output(&dir.join("metrics.jsonl"));
        fs::write(dir.join("config.toml"), cfg.to_toml()).context("writing config.toml")?;
        record.write(&dir.join("run.json"))?;
    }
    Ok(())
}
