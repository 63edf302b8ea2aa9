//! Run configuration: an optional TOML file, overridden field by field by flags.
//!
//! Relative paths inside a config file are resolved against the file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use freqkv_core::spectral::Convention;
use freqkv_core::{CachePolicy, CachePolicyConfig, Model, ModelConfig, PolicyKind, WeightStore};
use serde::Deserialize;

use crate::error::{CliError, Result};

pub const CONFIG_FORMAT_VERSION: u32 = 1;
pub const OUT_DIR_ENV: &str = "FREQKV_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "freqkv-out";
const DEFAULT_GAMMA: f64 = 0.5;
const DEFAULT_SINKS: usize = 4;

/// Flags shared by every command.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run config; flags override its values.
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    /// Model preset: `desk` or `llama2-7b`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Weights file written by `freqkv init`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Seed for random weights and any sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cache policy tag.
    #[arg(long)]
    pub policy: Option<PolicyKind>,
    /// Window N (defaults to the model's context window).
    #[arg(long)]
    pub window: Option<usize>,
    /// Retaining ratio gamma.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Sink count S.
    #[arg(long)]
    pub sinks: Option<usize>,
    /// Token file: whitespace-separated ids, one stream per line, or `.bin` u32 LE.
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Output directory (default: $FREQKV_OUT_DIR, then ./freqkv-out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Leave the wall-clock timestamp out of the run manifest.
    #[arg(long)]
    pub no_timestamp: bool,
}

/// On-disk schema. Every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub format_version: Option<u32>,
    pub preset: Option<String>,
    pub model: Option<ModelConfig>,
    pub weights: Option<PathBuf>,
    pub seed: Option<u64>,
    pub policy: Option<PolicyKind>,
    pub policies: Option<Vec<PolicyKind>>,
    pub window: Option<usize>,
    pub gamma: Option<f64>,
    pub sinks: Option<usize>,
    pub tokens: Option<PathBuf>,
    pub max_len: Option<usize>,
    pub out: Option<PathBuf>,
    pub temperature: Option<f64>,
    pub fraction: Option<f64>,
    pub band: Option<f64>,
    pub convention: Option<Convention>,
    pub per_head: Option<bool>,
    pub streams: Option<usize>,
    pub lengths: Option<Vec<usize>>,
    pub fft_constant: Option<f64>,
    pub no_timestamp: Option<bool>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| CliError::ConfigRead {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: FileConfig = toml::from_str(&text).map_err(|source| CliError::ConfigParse {
            path: path.to_path_buf(),
            source,
        })?;
        if let Some(v) = cfg.format_version {
            if v != CONFIG_FORMAT_VERSION {
                return Err(CliError::usage(format!(
                    "{}: config format_version {v} is not supported (expected {CONFIG_FORMAT_VERSION})",
                    path.display()
                )));
            }
        }
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.weights, &mut cfg.tokens, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    match name {
        "desk" => Ok(ModelConfig::desk()),
        "llama2-7b" => Ok(ModelConfig::llama2_7b()),
        other => Err(CliError::usage(format!(
            "unknown preset `{other}` (expected `desk` or `llama2-7b`)"
        ))),
    }
}

/// Flags merged over the config file, before command-specific defaults.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub file: FileConfig,
    pub model: ModelConfig,
    pub weights: Option<PathBuf>,
    pub seed: Option<u64>,
    pub policy: CachePolicy,
    pub tokens: Option<PathBuf>,
    pub max_len: Option<usize>,
    pub out: PathBuf,
    pub timestamp: bool,
}

impl Resolved {
    pub fn new(args: &CommonArgs) -> Result<Self> {
        let file = match &args.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let model = match (&args.preset, &file.preset, &file.model) {
            (Some(name), _, _) => preset(name)?,
            (None, Some(_), Some(_)) => {
                return Err(CliError::usage(
                    "config sets both `preset` and an inline [model]; keep one",
                ))
            }
            (None, Some(name), None) => preset(name)?,
            (None, None, Some(m)) => m.clone(),
            (None, None, None) => ModelConfig::desk(),
        };
        model
            .validate()
            .map_err(|e| CliError::usage(format!("model config: {e}")))?;

        let kind = args.policy.or(file.policy).unwrap_or(PolicyKind::FreqKv);
        let window = args.window.or(file.window).unwrap_or(model.context_window);
        let gamma = args.gamma.or(file.gamma).unwrap_or(DEFAULT_GAMMA);
        let sinks = args.sinks.or(file.sinks).unwrap_or(DEFAULT_SINKS);
        let policy_config = CachePolicyConfig::new(window, gamma, sinks)
            .map_err(|e| CliError::usage(format!("policy config: {e}")))?;

        let out = args
            .out
            .clone()
            .or_else(|| file.out.clone())
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
        let timestamp = !(args.no_timestamp || file.no_timestamp.unwrap_or(false));

        Ok(Self {
            weights: args.weights.clone().or_else(|| file.weights.clone()),
            seed: args.seed.or(file.seed),
            policy: CachePolicy::new(kind, policy_config),
            tokens: args.tokens.clone().or_else(|| file.tokens.clone()),
            max_len: args.max_len.or(file.max_len),
            model,
            out,
            timestamp,
            file,
        })
    }

    pub fn window(&self) -> usize {
        self.policy.config.window
    }

    /// Same window parameters, another policy tag.
    pub fn with_kind(&self, kind: PolicyKind) -> CachePolicy {
        CachePolicy::new(kind, self.policy.config)
    }

    /// Fails with a usage error unless weights or a seed are configured.
    pub fn require_model_source(&self) -> Result<()> {
        if self.weights.is_none() && self.seed.is_none() {
            return Err(CliError::usage(
                "no model weights: pass --weights <file> or --seed <n> for random weights",
            ));
        }
        Ok(())
    }

    pub fn load_model(&self) -> Result<Model> {
        self.require_model_source()?;
        match (&self.weights, self.seed) {
            (Some(path), _) => {
                let store = WeightStore::load(path).map_err(|e| match e {
                    freqkv_core::Error::Io(source) => CliError::Io {
                        path: path.clone(),
                        source,
                    },
                    other => other.into(),
                })?;
                Ok(Model::new(self.model.clone(), &store)?)
            }
            (None, Some(seed)) => Ok(Model::random(self.model.clone(), seed)?),
            (None, None) => unreachable!("checked above"),
        }
    }
}

pub fn check_fraction(name: &str, value: f64, lo_open: bool, hi_open: bool) -> Result<f64> {
    let lo_ok = if lo_open { value > 0.0 } else { value >= 0.0 };
    let hi_ok = if hi_open { value < 1.0 } else { value <= 1.0 };
    if lo_ok && hi_ok {
        Ok(value)
    } else {
        Err(CliError::usage(format!(
            "{name} must lie in {}0, 1{}, got {value}",
            if lo_open { "(" } else { "[" },
            if hi_open { ")" } else { "]" }
        )))
    }
}
