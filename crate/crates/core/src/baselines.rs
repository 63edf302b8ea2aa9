//! Alternative cache policies behind the [`KvCache`] interface.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::Rope;
use crate::cache::{CachePolicyConfig, CacheView, CompressionEvent, FreqKvCache, KvCache};
use crate::error::{Error, Result};
use crate::spectral::Compressor;
use crate::tensor::KvTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Unbounded cache, no compression.
    Full,
    /// Sinks plus a sliding window of the most recent `N - S` tokens.
    Dropping,
    /// Low-pass frequency compression with rescaling, pre-RoPE keys.
    #[serde(rename = "freqkv")]
    FreqKv,
    /// Keeps the highest frequencies instead of the lowest.
    #[serde(rename = "freqkv_highfreq")]
    FreqKvHighFreq,
    /// Keys are rotated with their original sequence position before caching.
    #[serde(rename = "freqkv_post_rope")]
    FreqKvPostRope,
    /// Low-pass compression without the `sqrt(L/N)` rescale.
    #[serde(rename = "freqkv_no_rescale")]
    FreqKvNoRescale,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::Full,
        PolicyKind::Dropping,
        PolicyKind::FreqKv,
        PolicyKind::FreqKvHighFreq,
        PolicyKind::FreqKvPostRope,
        PolicyKind::FreqKvNoRescale,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            PolicyKind::Full => "full",
            PolicyKind::Dropping => "dropping",
            PolicyKind::FreqKv => "freqkv",
            PolicyKind::FreqKvHighFreq => "freqkv_highfreq",
            PolicyKind::FreqKvPostRope => "freqkv_post_rope",
            PolicyKind::FreqKvNoRescale => "freqkv_no_rescale",
        }
    }

    pub fn is_bounded(self) -> bool {
        self != PolicyKind::Full
    }

    pub fn compresses(self) -> bool {
        !matches!(self, PolicyKind::Full | PolicyKind::Dropping)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown policy `{s}` (expected one of: {})",
                    PolicyKind::ALL.map(|k| k.tag()).join(", ")
                ))
            })
    }
}

/// A policy tag plus the window parameters it runs with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CachePolicy {
    pub kind: PolicyKind,
    #[serde(flatten)]
    pub config: CachePolicyConfig,
}

impl CachePolicy {
    pub fn new(kind: PolicyKind, config: CachePolicyConfig) -> Self {
        Self { kind, config }
    }

    /// Builds one empty cache (one per layer in a model).
    pub fn build(&self, kv_heads: usize, head_dim: usize, rope_base: f64) -> Result<Box<dyn KvCache>> {
        self.config.validate()?;
        let freq = |c: Compressor| FreqKvCache::with_compressor(self.config, kv_heads, head_dim, c);
        Ok(match self.kind {
            PolicyKind::Full => Box::new(FullCache::new(kv_heads, head_dim)),
            PolicyKind::Dropping => Box::new(DroppingCache::new(self.config, kv_heads, head_dim)),
            PolicyKind::FreqKv => Box::new(freq(Compressor::LOW_PASS)?),
            PolicyKind::FreqKvHighFreq => Box::new(freq(Compressor::HIGH_PASS)?),
            PolicyKind::FreqKvNoRescale => Box::new(freq(Compressor::LOW_PASS_NO_RESCALE)?),
            PolicyKind::FreqKvPostRope => Box::new(PostRopeCache::new(
                freq(Compressor::LOW_PASS)?,
                Rope::unbounded(head_dim, rope_base, self.config.window)?,
            )),
        })
    }
}

/// Keeps everything.
#[derive(Debug, Clone)]
pub struct FullCache {
    keys: KvTensor,
    values: KvTensor,
}

impl FullCache {
    pub fn new(kv_heads: usize, head_dim: usize) -> Self {
        Self {
            keys: KvTensor::empty(kv_heads, head_dim),
            values: KvTensor::empty(kv_heads, head_dim),
        }
    }
}

impl KvCache for FullCache {
    fn kv_heads(&self) -> usize {
        self.keys.n_heads()
    }

    fn head_dim(&self) -> usize {
        self.keys.head_dim()
    }

    fn rows(&self) -> usize {
        self.keys.seq_len()
    }

    fn tokens_seen(&self) -> usize {
        self.keys.seq_len()
    }

    fn compression_count(&self) -> usize {
        0
    }

    fn room(&self) -> usize {
        usize::MAX
    }

    fn make_room(&mut self) -> Result<Vec<CompressionEvent>> {
        Ok(Vec::new())
    }

    fn admit(&mut self, k: &KvTensor, v: &KvTensor, start: usize, end: usize) -> Result<()> {
        self.keys.extend_rows(k, start, end);
        self.values.extend_rows(v, start, end);
        Ok(())
    }

    fn view(&self) -> CacheView<'_> {
        CacheView {
            keys: vec![&self.keys],
            values: vec![&self.values],
            keys_rotated: false,
            next_position: self.keys.seq_len(),
        }
    }

    fn rope_limit(&self) -> Option<usize> {
        None
    }
}

/// `S` sink rows plus the most recent `N - S` rows; older rows are evicted one at a time.
#[derive(Debug, Clone)]
pub struct DroppingCache {
    config: CachePolicyConfig,
    sink_k: KvTensor,
    sink_v: KvTensor,
    window_k: KvTensor,
    window_v: KvTensor,
    tokens_seen: usize,
    evicted: usize,
}

impl DroppingCache {
    pub fn new(config: CachePolicyConfig, kv_heads: usize, head_dim: usize) -> Self {
        let empty = KvTensor::empty(kv_heads, head_dim);
        Self {
            config,
            sink_k: empty.clone(),
            sink_v: empty.clone(),
            window_k: empty.clone(),
            window_v: empty,
            tokens_seen: 0,
            evicted: 0,
        }
    }

    pub fn evicted(&self) -> usize {
        self.evicted
    }

    /// Original indices of the tokens currently held, in cache order.
    pub fn retained_tokens(&self) -> Vec<usize> {
        let sinks = 0..self.sink_k.seq_len();
        let start = self.sink_k.seq_len() + self.evicted;
        sinks.chain(start..self.tokens_seen).collect()
    }
}

impl KvCache for DroppingCache {
    fn kv_heads(&self) -> usize {
        self.sink_k.n_heads()
    }

    fn head_dim(&self) -> usize {
        self.sink_k.head_dim()
    }

    fn rows(&self) -> usize {
        self.sink_k.seq_len() + self.window_k.seq_len()
    }

    fn tokens_seen(&self) -> usize {
        self.tokens_seen
    }

    fn compression_count(&self) -> usize {
        0
    }

    fn room(&self) -> usize {
        self.config.window.saturating_sub(self.rows())
    }

    fn make_room(&mut self) -> Result<Vec<CompressionEvent>> {
        if self.room() == 0 {
            self.window_k.drain_rows(0, 1);
            self.window_v.drain_rows(0, 1);
            self.evicted += 1;
        }
        Ok(Vec::new())
    }

    fn admit(&mut self, k: &KvTensor, v: &KvTensor, start: usize, end: usize) -> Result<()> {
        let to_sink = (self.config.sinks - self.sink_k.seq_len()).min(end - start);
        self.sink_k.extend_rows(k, start, start + to_sink);
        self.sink_v.extend_rows(v, start, start + to_sink);
        self.window_k.extend_rows(k, start + to_sink, end);
        self.window_v.extend_rows(v, start + to_sink, end);
        self.tokens_seen += end - start;
        Ok(())
    }

    fn view(&self) -> CacheView<'_> {
        CacheView {
            keys: vec![&self.sink_k, &self.window_k],
            values: vec![&self.sink_v, &self.window_v],
            keys_rotated: false,
            next_position: self.rows(),
        }
    }

    fn rope_limit(&self) -> Option<usize> {
        Some(self.config.window)
    }
}

/// Frequency compression applied to keys that were already rotated with their original
/// sequence positions. Query positions follow the stream and pass `N` once the stream
/// does.
#[derive(Debug, Clone)]
pub struct PostRopeCache {
    inner: FreqKvCache,
    rope: Rope,
    max_position: Option<usize>,
}

impl PostRopeCache {
    pub fn new(inner: FreqKvCache, rope: Rope) -> Self {
        Self {
            inner,
            rope,
            max_position: None,
        }
    }

    pub fn inner(&self) -> &FreqKvCache {
        &self.inner
    }

    /// Largest rotary position applied to a stored key so far.
    pub fn max_position(&self) -> Option<usize> {
        self.max_position
    }
}

impl KvCache for PostRopeCache {
    fn kv_heads(&self) -> usize {
        self.inner.kv_heads()
    }

    fn head_dim(&self) -> usize {
        self.inner.head_dim()
    }

    fn rows(&self) -> usize {
        self.inner.rows()
    }

    fn tokens_seen(&self) -> usize {
        self.inner.tokens_seen()
    }

    fn compression_count(&self) -> usize {
        self.inner.compression_count()
    }

    fn room(&self) -> usize {
        self.inner.room()
    }

    fn make_room(&mut self) -> Result<Vec<CompressionEvent>> {
        self.inner.make_room()
    }

    fn admit(&mut self, k: &KvTensor, v: &KvTensor, start: usize, end: usize) -> Result<()> {
        let first = self.inner.tokens_seen();
        let positions: Vec<usize> = (first..first + end - start).collect();
        let rotated = self.rope.apply(&k.slice_rows(start, end), &positions)?;
        if let Some(&last) = positions.last() {
            self.max_position = self.max_position.max(Some(last));
        }
        self.inner.admit(&rotated, &v.slice_rows(start, end), 0, end - start)
    }

    fn view(&self) -> CacheView<'_> {
        CacheView {
            keys_rotated: true,
            next_position: self.inner.tokens_seen(),
            ..self.inner.view()
        }
    }

    fn rope_limit(&self) -> Option<usize> {
        None
    }
}
