//! `fluxsteg`: build fluctuation datasets, train cost generators, embed and
//! extract messages, and measure detectability.
//!
//! Parameters resolve as flags > environment > config file > defaults. Every
//! command logs its effective parameters and writes a run manifest next to
//! its output.

mod dataset;
mod eval;
mod report;
mod run;
mod stego;
mod train;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "fluxsteg", version, about = "Fluctuation-aware steganographic cost learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate cover/fluctuation sets and write manifests.
    Dataset(dataset::DatasetArgs),
    /// Train a probability generator against two discriminators.
    Train(train::TrainArgs),
    /// Write a cost map for a cover from a trained generator or a baseline.
    Costs(stego::CostsArgs),
    /// Hide a message in a cover under a cost map.
    Embed(stego::EmbedArgs),
    /// Recover a message from a stego image.
    Extract(stego::ExtractArgs),
    /// Blend a cost map with volatility costs from a fluctuation stack.
    Combine(stego::CombineArgs),
    /// Train steganalyzers and measure detection error per method and payload.
    Eval(eval::EvalArgs),
    /// Summarize training metrics or render evaluation tables.
    Report(report::ReportArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Dataset(a) => dataset::run(a),
        Command::Train(a) => train::run(a),
        Command::Costs(a) => stego::costs(a),
        Command::Embed(a) => stego::embed(a),
        Command::Extract(a) => stego::extract(a),
        Command::Combine(a) => stego::combine(a),
        Command::Eval(a) => eval::run(a),
        Command::Report(a) => report::run(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
