use std::path::PathBuf;

use clap::Args;
use freqkv_core::analysis::{flops_report, perturb_report, spectrum_report, FlopsConventions};
use freqkv_core::model::argmax;
use freqkv_core::spectral::Convention;
use freqkv_core::tokens::{format_text, parse_text, read_streams, synthetic_corpus};
use freqkv_core::{expected_compressions, CachePolicy, ModelConfig, PolicyKind, RunMetadata, WeightStore};
use serde::Serialize;

use crate::config::{check_fraction, CommonArgs, Resolved};
use crate::error::{CliError, Result};
use crate::output::OutputDir;

/// 32 drifting streams of 256 ids over a 512-token vocabulary (the desk preset).
pub const BUNDLED_CORPUS: &str = include_str!("../data/corpus.txt");
const DEFAULT_PROMPT_LEN: usize = 16;

fn bundled_corpus() -> Vec<Vec<u32>> {
    parse_text(BUNDLED_CORPUS).expect("bundled corpus parses")
}

fn check_vocab(streams: &[Vec<u32>], model: &ModelConfig) -> Result<()> {
    if let Some(&bad) = streams.iter().flatten().find(|&&t| t as usize >= model.vocab_size) {
        return Err(CliError::usage(format!(
            "token id {bad} is outside the model vocabulary of {}",
            model.vocab_size
        )));
    }
    Ok(())
}

/// Streams from `--tokens`, or the bundled corpus.
fn input_streams(r: &Resolved) -> Result<Vec<Vec<u32>>> {
    let streams = match &r.tokens {
        Some(path) => read_streams(path).map_err(|e| match e {
            freqkv_core::Error::Io(source) => CliError::Io {
                path: path.clone(),
                source,
            },
            other => CliError::usage(format!("{}: {other}", path.display())),
        })?,
        None => bundled_corpus(),
    };
    let streams: Vec<_> = streams.into_iter().filter(|s| !s.is_empty()).collect();
    if streams.is_empty() {
        return Err(CliError::usage("token input holds no streams"));
    }
    check_vocab(&streams, &r.model)?;
    Ok(streams)
}

fn parse_convention(s: &str) -> std::result::Result<Convention, String> {
    match s {
        "amplitude" => Ok(Convention::Amplitude),
        "power" => Ok(Convention::Power),
        other => Err(format!("unknown convention `{other}` (amplitude or power)")),
    }
}

fn limit_streams(mut streams: Vec<Vec<u32>>, count: Option<usize>, len: usize) -> Result<Vec<Vec<u32>>> {
    if let Some(c) = count {
        if c == 0 {
            return Err(CliError::usage("--streams must be positive"));
        }
        streams.truncate(c);
    }
    for s in &mut streams {
        s.truncate(len);
    }
    Ok(streams)
}

// ---------------------------------------------------------------------------- decode

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Softmax temperature; 0 decodes greedily.
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Serialize)]
struct EventRow {
    index: usize,
    step: usize,
    block_rows: usize,
    sinks: usize,
    compressed: usize,
    incoming: usize,
}

#[derive(Serialize)]
struct DecodeSummary {
    tokens: usize,
    prompt_tokens: usize,
    generated_tokens: usize,
    compression_count: usize,
    expected_compressions: Option<usize>,
    max_rows: usize,
    max_position: Option<usize>,
}

pub fn decode(args: &DecodeArgs) -> Result<()> {
    let r = Resolved::new(&args.common)?;
    r.require_model_source()?;
    let temperature = args.temperature.or(r.file.temperature).unwrap_or(0.0);
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(CliError::usage(format!("temperature must be >= 0, got {temperature}")));
    }
    let max_len = r.max_len.unwrap_or(4 * r.window());
    let prompt = match &r.tokens {
        Some(_) => input_streams(&r)?.concat(),
        None => bundled_corpus()[0][..DEFAULT_PROMPT_LEN].to_vec(),
    };
    check_vocab(std::slice::from_ref(&prompt), &r.model)?;
    if prompt.len() > max_len {
        return Err(CliError::usage(format!(
            "prompt has {} tokens, more than --max-len {max_len}",
            prompt.len()
        )));
    }
    let model = r.load_model()?;
    let mut session = model.session(r.policy)?;
    let seed = r.seed.unwrap_or(0);
    let generated = session.generate(&prompt, max_len - prompt.len(), temperature, seed)?;
    let mut sequence = prompt.clone();
    sequence.extend(&generated);

    let mut out = OutputDir::create(&r.out)?;
    out.write_bytes("tokens.txt", format_text(&sequence).as_bytes())?;
    out.write_csv(
        "events.csv",
        session.events().iter().map(|e| EventRow {
            index: e.index,
            step: e.tokens_seen,
            block_rows: e.block_rows,
            sinks: e.sink_rows,
            compressed: e.compressed_rows,
            incoming: e.incoming_rows,
        }),
    )?;
    let summary = DecodeSummary {
        tokens: sequence.len(),
        prompt_tokens: prompt.len(),
        generated_tokens: generated.len(),
        compression_count: session.events().len(),
        expected_compressions: r
            .policy
            .kind
            .compresses()
            .then(|| expected_compressions(sequence.len(), &r.policy.config)),
        max_rows: session.max_rows(),
        max_position: session.max_position(),
    };
    out.write_json("summary.json", &summary)?;
    println!(
        "decoded {} tokens with {}: {} compressions, max cache rows {}",
        summary.tokens, r.policy.kind, summary.compression_count, summary.max_rows
    );
    out.finish("decode", RunMetadata::new(&r.model, r.policy, r.seed), r.timestamp)
}

// -------------------------------------------------------------------------- spectrum

#[derive(Debug, Args)]
pub struct SpectrumArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// `amplitude` (mean |z|) or `power` (mean z^2).
    #[arg(long, value_parser = parse_convention)]
    pub convention: Option<Convention>,
    /// Also report every kv head separately.
    #[arg(long)]
    pub per_head: bool,
    /// Use at most this many streams.
    #[arg(long)]
    pub streams: Option<usize>,
}

#[derive(Serialize)]
struct SpectrumRow {
    layer: usize,
    bin: usize,
    key: f64,
    value: f64,
}

#[derive(Serialize)]
struct HeadSpectrumRow {
    layer: usize,
    head: usize,
    bin: usize,
    key: f64,
    value: f64,
}

pub fn spectrum(args: &SpectrumArgs) -> Result<()> {
    let r = Resolved::new(&args.common)?;
    r.require_model_source()?;
    let convention = args.convention.or(r.file.convention).unwrap_or_default();
    let per_head = args.per_head || r.file.per_head.unwrap_or(false);
    let len = r.max_len.unwrap_or(r.model.context_window).min(r.model.context_window);
    let streams = limit_streams(input_streams(&r)?, args.streams.or(r.file.streams), len)?;
    let model = r.load_model()?;
    let report = spectrum_report(&model, &streams, convention, per_head)?;

    let mut out = OutputDir::create(&r.out)?;
    out.write_json("spectrum.json", &report)?;
    out.write_csv(
        "spectrum.csv",
        report.layers.iter().flat_map(|l| {
            l.key
                .magnitudes
                .iter()
                .zip(&l.value.magnitudes)
                .enumerate()
                .map(move |(bin, (k, v))| SpectrumRow {
                    layer: l.layer,
                    bin,
                    key: *k,
                    value: *v,
                })
        }),
    )?;
    if per_head {
        out.write_csv(
            "spectrum_heads.csv",
            report.layers.iter().flat_map(|l| {
                l.heads.iter().flat_map(move |h| {
                    h.key
                        .magnitudes
                        .iter()
                        .zip(&h.value.magnitudes)
                        .enumerate()
                        .map(move |(bin, (k, v))| HeadSpectrumRow {
                            layer: l.layer,
                            head: h.head,
                            bin,
                            key: *k,
                            value: *v,
                        })
                })
            }),
        )?;
    }
    for l in &report.layers {
        println!(
            "layer {:>2}: low-band share key {:.3} value {:.3}",
            l.layer, l.key.low_band_fraction, l.value.low_band_fraction
        );
    }
    out.finish("spectrum", RunMetadata::new(&r.model, r.policy, r.seed), r.timestamp)
}

// --------------------------------------------------------------------------- perturb

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Share of token positions replaced, in [0, 1].
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Share of frequency bins counted as the low band, in (0, 1).
    #[arg(long)]
    pub band: Option<f64>,
    #[arg(long)]
    pub streams: Option<usize>,
}

pub fn perturb(args: &PerturbArgs) -> Result<()> {
    let r = Resolved::new(&args.common)?;
    r.require_model_source()?;
    let fraction = check_fraction("fraction", args.fraction.or(r.file.fraction).unwrap_or(0.1), false, false)?;
    let band = check_fraction("band", args.band.or(r.file.band).unwrap_or(0.5), true, true)?;
    let len = r.max_len.unwrap_or(r.model.context_window).min(r.model.context_window);
    let streams = limit_streams(input_streams(&r)?, args.streams.or(r.file.streams), len)?;
    if let Some(short) = streams.iter().find(|s| s.len() < 8) {
        return Err(CliError::usage(format!(
            "perturbation needs streams of at least 8 tokens, found {}",
            short.len()
        )));
    }
    let model = r.load_model()?;
    let report = perturb_report(&model, &streams, fraction, band, r.seed.unwrap_or(0))?;

    let mut out = OutputDir::create(&r.out)?;
    out.write_json("perturb.json", &report)?;
    out.write_csv("perturb.csv", &report.layers)?;
    for l in &report.layers {
        println!(
            "layer {:>2}: key low {:.4} high {:.4} | value low {:.4} high {:.4}",
            l.layer, l.key_low, l.key_high, l.value_low, l.value_high
        );
    }
    out.finish("perturb", RunMetadata::new(&r.model, r.policy, r.seed), r.timestamp)
}

// ----------------------------------------------------------------------------- flops

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Stream lengths (default: N, 2N, 3N, 4N, 8N).
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    /// Policies to cost (default: --policy).
    #[arg(long, value_delimiter = ',')]
    pub policies: Option<Vec<PolicyKind>>,
    /// `c` in the per-column transform cost c·M·log2(M).
    #[arg(long)]
    pub fft_constant: Option<f64>,
}

#[derive(Serialize)]
struct FlopsRow {
    policy: PolicyKind,
    length: usize,
    compression_count: usize,
    attention: f64,
    projections: f64,
    ffn: f64,
    logits: f64,
    compression: f64,
    total: f64,
    compression_overhead_fraction: f64,
}

pub fn flops(args: &FlopsArgs) -> Result<()> {
    let r = Resolved::new(&args.common)?;
    let n = r.window();
    let lengths = args
        .lengths
        .clone()
        .or_else(|| r.file.lengths.clone())
        .unwrap_or_else(|| vec![n, 2 * n, 3 * n, 4 * n, 8 * n]);
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(CliError::usage("lengths must be positive"));
    }
    let policies = args
        .policies
        .clone()
        .or_else(|| r.file.policies.clone())
        .unwrap_or_else(|| vec![r.policy.kind]);
    let fft_constant = args.fft_constant.or(r.file.fft_constant).unwrap_or(1.0);
    if !(fft_constant > 0.0 && fft_constant.is_finite()) {
        return Err(CliError::usage("fft constant must be positive"));
    }
    let conventions = FlopsConventions {
        fft_constant,
        ..FlopsConventions::default()
    };
    let mut reports = Vec::new();
    for &kind in &policies {
        for &len in &lengths {
            reports.push(flops_report(&r.model, &r.with_kind(kind), len, conventions)?);
        }
    }

    let mut out = OutputDir::create(&r.out)?;
    out.write_json("flops.json", &reports)?;
    out.write_csv(
        "flops.csv",
        reports.iter().map(|f| FlopsRow {
            policy: f.policy,
            length: f.length,
            compression_count: f.compression_count,
            attention: f.attention,
            projections: f.projections,
            ffn: f.ffn,
            logits: f.logits,
            compression: f.compression,
            total: f.total,
            compression_overhead_fraction: f.compression_overhead_fraction,
        }),
    )?;
    println!("{:<18} {:>8} {:>6} {:>14} {:>12}", "policy", "length", "count", "TFLOPs", "overhead %");
    for f in &reports {
        println!(
            "{:<18} {:>8} {:>6} {:>14.3} {:>12.4}",
            f.policy.tag(),
            f.length,
            f.compression_count,
            f.total / 1e12,
            100.0 * f.compression_overhead_fraction
        );
    }
    out.finish("flops", RunMetadata::new(&r.model, r.policy, r.seed), r.timestamp)
}

// ----------------------------------------------------------------------------- bench

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// At least two policies to compare on the same stream (default: full,dropping,freqkv).
    #[arg(long, value_delimiter = ',')]
    pub policies: Option<Vec<PolicyKind>>,
}

#[derive(Serialize)]
struct BenchRow {
    policy: PolicyKind,
    length: usize,
    flops: f64,
    compression_count: usize,
    max_rows: usize,
}

#[derive(Debug, Serialize)]
pub struct BenchSummary {
    pub policy: PolicyKind,
    pub tokens: usize,
    pub compression_count: usize,
    pub max_rows: usize,
    pub max_position: Option<usize>,
    /// First step (tokens consumed) whose greedy prediction differs from the first
    /// policy's, if any.
    pub divergence_step: Option<usize>,
    /// Share of steps whose greedy prediction matches the first policy's.
    pub agreement: f64,
}

pub fn bench(args: &BenchArgs) -> Result<()> {
    let r = Resolved::new(&args.common)?;
    let policies = args
        .policies
        .clone()
        .or_else(|| r.file.policies.clone())
        .unwrap_or_else(|| vec![PolicyKind::Full, PolicyKind::Dropping, PolicyKind::FreqKv]);
    if policies.len() < 2 {
        return Err(CliError::usage("bench compares at least two policies (--policies a,b)"));
    }
    r.require_model_source()?;
    let n = r.window();
    let max_len = r.max_len.unwrap_or(8 * n);
    if max_len == 0 {
        return Err(CliError::usage("--max-len must be positive"));
    }
    let pool = input_streams(&r)?.concat();
    let stream: Vec<u32> = pool.iter().copied().cycle().take(max_len).collect();
    let model = r.load_model()?;

    let mut rows = Vec::new();
    let mut runs: Vec<(CachePolicy, Vec<u32>, usize, usize, Option<usize>)> = Vec::new();
    for &kind in &policies {
        let policy = r.with_kind(kind);
        let mut session = model.session(policy)?;
        let mut predictions = Vec::with_capacity(stream.len());
        for (i, &t) in stream.iter().enumerate() {
            predictions.push(argmax(&session.decode_step(t)?));
            let seen = i + 1;
            if seen % n == 0 || seen == stream.len() {
                rows.push(BenchRow {
                    policy: kind,
                    length: seen,
                    flops: flops_report(&r.model, &policy, seen, FlopsConventions::default())?.total,
                    compression_count: session.caches()[0].compression_count(),
                    max_rows: session.max_rows(),
                });
            }
        }
        let count = session.caches()[0].compression_count();
        runs.push((policy, predictions, count, session.max_rows(), session.max_position()));
    }

    let reference = runs[0].1.clone();
    let summaries: Vec<BenchSummary> = runs
        .iter()
        .map(|(policy, preds, count, rows, pos)| {
            let same = preds.iter().zip(&reference).filter(|(a, b)| a == b).count();
            BenchSummary {
                policy: policy.kind,
                tokens: preds.len(),
                compression_count: *count,
                max_rows: *rows,
                max_position: *pos,
                divergence_step: preds.iter().zip(&reference).position(|(a, b)| a != b).map(|i| i + 1),
                agreement: same as f64 / preds.len() as f64,
            }
        })
        .collect();

    let mut out = OutputDir::create(&r.out)?;
    out.write_csv("bench.csv", rows)?;
    out.write_json("bench.json", &summaries)?;
    println!(
        "{:<18} {:>7} {:>6} {:>9} {:>10} {:>10}",
        "policy", "tokens", "count", "max rows", "diverges", "agreement"
    );
    for s in &summaries {
        let step = s.divergence_step.map_or("-".to_string(), |d| d.to_string());
        println!(
            "{:<18} {:>7} {:>6} {:>9} {:>10} {:>10.3}",
            s.policy.tag(),
            s.tokens,
            s.compression_count,
            s.max_rows,
            step,
            s.agreement
        );
    }
    out.finish("bench", RunMetadata::new(&r.model, r.policy, r.seed), r.timestamp)
}

// ------------------------------------------------------------------ init and corpus

#[derive(Debug, Args)]
pub struct InitArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// File name inside the output directory.
    #[arg(long, default_value = "weights.bin")]
    pub name: PathBuf,
}

pub fn init(args: &InitArgs) -> Result<()> {
    let r = Resolved::new(&args.common)?;
    let seed = r
        .seed
        .ok_or_else(|| CliError::usage("init needs --seed to draw random weights"))?;
    let store = WeightStore::init_random(&r.model, seed)?;
    let mut bytes = Vec::new();
    store.write(&mut bytes)?;
    let name = args.name.to_string_lossy().into_owned();
    let mut out = OutputDir::create(&r.out)?;
    out.write_bytes(&name, &bytes)?;
    println!("wrote {} tensors to {}", store.len(), out.path(&name).display());
    out.finish("init", RunMetadata::new(&r.model, r.policy, Some(seed)), r.timestamp)
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of streams.
    #[arg(long)]
    pub streams: Option<usize>,
}

pub fn corpus(args: &CorpusArgs) -> Result<()> {
    let r = Resolved::new(&args.common)?;
    let count = args.streams.or(r.file.streams).unwrap_or(32);
    let len = r.max_len.unwrap_or(r.model.context_window);
    if count == 0 || len == 0 {
        return Err(CliError::usage("corpus needs a positive stream count and length"));
    }
    let seed = r.seed.unwrap_or(0);
    let streams = synthetic_corpus(count, len, r.model.vocab_size, seed);
    let text: String = streams.iter().map(|s| format_text(s)).collect();
    let mut out = OutputDir::create(&r.out)?;
    out.write_bytes("corpus.txt", text.as_bytes())?;
    out.finish("corpus", RunMetadata::new(&r.model, r.policy, Some(seed)), r.timestamp)
}
