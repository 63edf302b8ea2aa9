//! `freqkv`: decode, analyse and benchmark KV cache policies from the command line.

mod commands;
mod config;
mod error;
mod output;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "freqkv", version, about = "Frequency-compressed KV cache experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decode from a prompt and log every compression event.
    Decode(commands::DecodeArgs),
    /// Average DCT spectra of captured keys and values per layer.
    Spectrum(commands::SpectrumArgs),
    /// Band-wise similarity of KV states under token perturbation.
    Perturb(commands::PerturbArgs),
    /// Analytic FLOPs and compression overhead.
    Flops(commands::FlopsArgs),
    /// Run several policies over one stream and compare them.
    Bench(commands::BenchArgs),
    /// Write randomly initialised weights.
    Init(commands::InitArgs),
    /// Write a synthetic token corpus.
    Corpus(commands::CorpusArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Decode(a) => commands::decode(a),
        Command::Spectrum(a) => commands::spectrum(a),
        Command::Perturb(a) => commands::perturb(a),
        Command::Flops(a) => commands::flops(a),
        Command::Bench(a) => commands::bench(a),
        Command::Init(a) => commands::init(a),
        Command::Corpus(a) => commands::corpus(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
