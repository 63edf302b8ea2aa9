//! Spectral diagnostics over captured KV states and the analytic cost model.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{CachePolicy, PolicyKind};
use crate::cache::expected_compressions;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::spectral::{band_cut, Convention, DctPlan, PowerSpectrum, SpectrumAccumulator};
use crate::tensor::KvTensor;

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Captured pre-RoPE `(keys, values)` for every layer of one stream.
pub type LayerCaptures = Vec<(KvTensor, KvTensor)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpectrum {
    pub head: usize,
    pub key: PowerSpectrum,
    pub value: PowerSpectrum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpectrum {
    pub layer: usize,
    pub key: PowerSpectrum,
    pub value: PowerSpectrum,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub heads: Vec<HeadSpectrum>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub format_version: u32,
    pub convention: Convention,
    /// Common stream length the spectra were computed over.
    pub length: usize,
    pub samples: usize,
    pub layers: Vec<LayerSpectrum>,
}

impl SpectrumReport {
    /// Averages spectra over streams, heads and channels. Streams are truncated to the
    /// shortest one.
    pub fn from_captures(
        captures: &[LayerCaptures],
        convention: Convention,
        per_head: bool,
    ) -> Result<Self> {
        let first = captures.first().ok_or_else(|| Error::invalid("empty corpus"))?;
        let length = captures
            .iter()
            .flat_map(|c| c.iter().map(|(k, _)| k.seq_len()))
            .min()
            .unwrap_or(0);
        if length == 0 {
            return Err(Error::invalid("captured streams are empty"));
        }
        let n_layers = first.len();
        let mut layers = Vec::with_capacity(n_layers);
        for layer in 0..n_layers {
            let mut key = SpectrumAccumulator::new(length)?;
            let mut value = SpectrumAccumulator::new(length)?;
            for c in captures {
                let (k, v) = c
                    .get(layer)
                    .ok_or_else(|| Error::invalid("captures disagree on layer count"))?;
                key.add_block(k)?;
                value.add_block(v)?;
            }
            let heads = if per_head {
                let n_heads = first[layer].0.n_heads();
                (0..n_heads)
                    .map(|h| {
                        let mut key = SpectrumAccumulator::new(length)?;
                        let mut value = SpectrumAccumulator::new(length)?;
                        for c in captures {
                            key.add_heads(&c[layer].0, h..h + 1)?;
                            value.add_heads(&c[layer].1, h..h + 1)?;
                        }
                        Ok(HeadSpectrum {
                            head: h,
                            key: key.finish(convention)?,
                            value: value.finish(convention)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            layers.push(LayerSpectrum {
                layer,
                key: key.finish(convention)?,
                value: value.finish(convention)?,
                heads,
            });
        }
        Ok(Self {
            format_version: REPORT_FORMAT_VERSION,
            convention,
            length,
            samples: captures.len(),
            layers,
        })
    }
}

fn check_streams(model: &Model, streams: &[Vec<u32>], min_len: usize) -> Result<()> {
    if streams.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let window = model.config().context_window;
    for (i, s) in streams.iter().enumerate() {
        if s.len() < min_len.max(1) || s.len() > window {
            return Err(Error::invalid(format!(
                "stream {i} has {} tokens; analysis needs {}..={window}",
                s.len(),
                min_len.max(1)
            )));
        }
    }
    Ok(())
}

/// Average KV spectra per layer over a corpus of streams no longer than the window.
pub fn spectrum_report(
    model: &Model,
    streams: &[Vec<u32>],
    convention: Convention,
    per_head: bool,
) -> Result<SpectrumReport> {
    check_streams(model, streams, 1)?;
    let captures = streams
        .iter()
        .map(|s| model.capture_kv(s))
        .collect::<Result<Vec<_>>>()?;
    SpectrumReport::from_captures(&captures, convention, per_head)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPerturb {
    pub layer: usize,
    pub key_low: f64,
    pub key_high: f64,
    pub value_low: f64,
    pub value_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbReport {
    pub format_version: u32,
    pub fraction: f64,
    /// Share of bins in the low band.
    pub band: f64,
    pub streams: usize,
    pub layers: Vec<LayerPerturb>,
}

/// Replaces `ceil(fraction * len)` positions with different, uniformly drawn ids.
pub fn perturb_tokens(tokens: &[u32], fraction: f64, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let count = ((fraction * tokens.len() as f64).ceil() as usize).min(tokens.len());
    let mut out = tokens.to_vec();
    if vocab < 2 {
        return out;
    }
    for i in index::sample(rng, tokens.len(), count) {
        let draw = rng.random_range(0..vocab as u32 - 1);
        out[i] = if draw >= tokens[i] { draw + 1 } else { draw };
    }
    out
}

/// Splits each column into its low and high bands and returns both reconstructions,
/// flattened in tensor order.
fn band_split(block: &KvTensor, band: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = block.seq_len();
    let plan = DctPlan::new(n)?;
    let cut = band_cut(n, band);
    let width = block.row_width();
    let mut low = vec![0.0; n * width];
    let mut high = vec![0.0; n * width];
    let mut coeffs = vec![0.0; n];
    let mut masked = vec![0.0; n];
    let mut recon = vec![0.0; n];
    for h in 0..block.n_heads() {
        for c in 0..block.head_dim() {
            let col = block.column(h, c);
            plan.forward(&col, &mut coeffs);
            let offset = h * block.head_dim() + c;
            for (dst, keep_low) in [(&mut low, true), (&mut high, false)] {
                for (t, m) in masked.iter_mut().enumerate() {
                    *m = if (t < cut) == keep_low { coeffs[t] } else { 0.0 };
                }
                plan.inverse(&masked, &mut recon);
                for (r, x) in recon.iter().enumerate() {
                    dst[r * width + offset] = *x;
                }
            }
        }
    }
    Ok((low, high))
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        1.0
    } else if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Band-wise sensitivity of KV states to a small token perturbation.
pub fn perturb_report(
    model: &Model,
    streams: &[Vec<u32>],
    fraction: f64,
    band: f64,
    seed: u64,
) -> Result<PerturbReport> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("perturb fraction {fraction} outside [0, 1]")));
    }
    if !(band > 0.0 && band < 1.0) {
        return Err(Error::invalid(format!("band split {band} outside (0, 1)")));
    }
    check_streams(model, streams, 8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = model.config().vocab_size;
    let n_layers = model.config().n_layers;
    let mut sums = vec![[0.0f64; 4]; n_layers];
    for stream in streams {
        let perturbed = perturb_tokens(stream, fraction, vocab, &mut rng);
        let a = model.capture_kv(stream)?;
        let b = model.capture_kv(&perturbed)?;
        for (layer, ((ka, va), (kb, vb))) in a.iter().zip(&b).enumerate() {
            let (kal, kah) = band_split(ka, band)?;
            let (kbl, kbh) = band_split(kb, band)?;
            let (val, vah) = band_split(va, band)?;
            let (vbl, vbh) = band_split(vb, band)?;
            let s = &mut sums[layer];
            s[0] += cosine_similarity(&kal, &kbl);
            s[1] += cosine_similarity(&kah, &kbh);
            s[2] += cosine_similarity(&val, &vbl);
            s[3] += cosine_similarity(&vah, &vbh);
        }
    }
    let count = streams.len() as f64;
    let layers = sums
        .iter()
        .enumerate()
        .map(|(layer, s)| LayerPerturb {
            layer,
            key_low: s[0] / count,
            key_high: s[1] / count,
            value_low: s[2] / count,
            value_high: s[3] / count,
        })
        .collect();
    Ok(PerturbReport {
        format_version: REPORT_FORMAT_VERSION,
        fraction,
        band,
        streams: streams.len(),
        layers,
    })
}

/// Counting conventions for the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsConventions {
    /// FLOPs per multiply-accumulate.
    pub mac_flops: f64,
    /// `c` in the per-column transform cost `c * M * log2(M)`.
    pub fft_constant: f64,
}

impl Default for FlopsConventions {
    fn default() -> Self {
        Self {
            mac_flops: 2.0,
            fft_constant: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub format_version: u32,
    pub policy: PolicyKind,
    pub length: usize,
    pub window: usize,
    pub gamma: f64,
    pub sinks: usize,
    pub conventions: FlopsConventions,
    pub attention: f64,
    pub projections: f64,
    pub ffn: f64,
    pub logits: f64,
    pub compression: f64,
    pub total: f64,
    pub compression_overhead_fraction: f64,
    pub compression_count: usize,
    /// Sum over tokens of the rows each token attends to (its own row included).
    pub visible_rows: u128,
}

/// Rows attended by token `t` summed over a stream of `length` tokens.
fn visible_rows(policy: &CachePolicy, length: usize) -> u128 {
    let cfg = &policy.config;
    let n = cfg.window as u128;
    let t = length as u128;
    match policy.kind {
        PolicyKind::Full => t * (t + 1) / 2,
        PolicyKind::Dropping => {
            let ramp = t.min(n);
            ramp * (ramp + 1) / 2 + (t - ramp) * n
        }
        _ if cfg.is_identity() => t * (t + 1) / 2,
        _ => {
            // Rows climb from S + L + 1 to N between triggers.
            let (s, l) = (cfg.sinks as u128, cfg.retain() as u128);
            let mut sum = t.min(n) * (t.min(n) + 1) / 2;
            let mut rest = t.saturating_sub(n);
            let chunk = cfg.admission_chunk() as u128;
            while rest > 0 {
                let take = rest.min(chunk);
                let lo = s + l + 1;
                sum += take * (2 * lo + take - 1) / 2;
                rest -= take;
            }
            sum
        }
    }
}

/// Closed-form FLOPs for processing `length` tokens, one cache pass per token.
pub fn flops_report(
    config: &ModelConfig,
    policy: &CachePolicy,
    length: usize,
    conventions: FlopsConventions,
) -> Result<FlopsReport> {
    if length == 0 {
        return Err(Error::invalid("length must be at least 1"));
    }
    config.validate()?;
    policy.config.validate()?;
    let mac = conventions.mac_flops;
    let layers = config.n_layers as f64;
    let (h, kv, f) = (
        config.hidden_dim as f64,
        config.kv_dim() as f64,
        config.ffn_dim as f64,
    );
    let t = length as f64;
    let vis = visible_rows(policy, length);

    let attention = mac * 2.0 * vis as f64 * h * layers;
    let projections = mac * t * (2.0 * h * h + 2.0 * h * kv) * layers;
    let ffn = mac * t * 3.0 * h * f * layers;
    let logits = mac * t * h * config.vocab_size as f64;

    let cfg = &policy.config;
    let compression_count = if policy.kind.compresses() {
        expected_compressions(length, cfg)
    } else {
        0
    };
    let columns = 2.0 * kv * layers;
    let transform = |m: f64| conventions.fft_constant * m * m.log2();
    let base_block = (cfg.window - cfg.sinks) as f64;
    let compression = if cfg.is_identity() {
        (0..compression_count)
            .map(|i| transform(base_block + i as f64) * columns)
            .sum()
    } else {
        compression_count as f64 * transform(base_block) * columns
    };

    let total = attention + projections + ffn + logits + compression;
    Ok(FlopsReport {
        format_version: REPORT_FORMAT_VERSION,
        policy: policy.kind,
        length,
        window: cfg.window,
        gamma: cfg.gamma,
        sinks: cfg.sinks,
        conventions,
        attention,
        projections,
        ffn,
        logits,
        compression,
        total,
        compression_overhead_fraction: compression / total,
        compression_count,
        visible_rows: vis,
    })
}
