use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use fluxsteg_core::adversary::DiscriminatorId;
use fluxsteg_core::evaluation::{render_table, EvalReport};
use fluxsteg_core::training::IterationRecord;
use serde::Serialize;

use crate::run::{write_atomic, RunRecord};

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// `metrics.jsonl` written by `train`.
    #[arg(long)]
    pub metrics: Vec<PathBuf>,
    /// Report JSON written by `eval`; tables merge all given files.
    #[arg(long)]
    pub eval: Vec<PathBuf>,
    /// Also write the rendered text here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn summarize(path: &PathBuf) -> Result<String> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<IterationRecord>(l).with_context(|| format!("{}: line {}", path.display(), i + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    let (Some(first), Some(last)) = (records.first(), records.last()) else {
        bail!("{} holds no iterations", path.display());
    };
    let d1 = records.iter().filter(|r| r.updated == DiscriminatorId::D1).count();
    let tail = &records[records.len() - records.len().div_ceil(10)..];
    let mean = |f: fn(&IterationRecord) -> f64| tail.iter().map(f).sum::<f64>() / tail.len() as f64;
    Ok(format!(
        "{}\n  iterations        {}\n  D1 / D2 updates   {} / {}\n  payload deviation {:.1} -> {:.1} bits (last 10% mean {:.1})\n  l_G               {:.4} -> {:.4}\n  e1 / e2 (last 10%) {:.4} / {:.4}\n",
        path.display(),
        records.len(),
        d1,
        records.len() - d1,
        first.payload_dev,
        last.payload_dev,
        mean(|r| r.payload_dev),
        first.l_g,
        last.l_g,
        mean(|r| r.e1),
        mean(|r| r.e2),
    ))
}

pub fn run(a: ReportArgs) -> Result<()> {
    if a.metrics.is_empty() && a.eval.is_empty() {
        bail!("give --metrics and/or --eval files");
    }
    let mut record = RunRecord::new("report", &a);
    let mut text = String::new();
    for m in &a.metrics {
        text.push_str(&summarize(m)?);
        record.input(m);
    }
    if !a.eval.is_empty() {
        let mut reports: Vec<EvalReport> = Vec::new();
        for p in &a.eval {
            let body = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            reports.extend(serde_json::from_str::<Vec<EvalReport>>(&body).with_context(|| format!("parsing {}", p.display()))?);
            record.input(p);
        }
        text.push_str("detection error P_E (%)\n");
        text.push_str(&render_table(&reports));
    }
    print!("{text}");
    if let Some(out) = &a.out {
        write_atomic(out, text.as_bytes())?;
        record.output(out);
        record.write(&crate::run::sidecar(out))?;
    }
    Ok(())
}
