//! The three-region frequency-compressed KV cache and the policy interface every cache
//! implements.
//!
//! Layout of a [`FreqKvCache`] at any instant:
//!
//! ```text
//! [ sinks (<= S) | compressed (<= L) | incoming ]      total rows <= N
//! ```
//!
//! Sinks hold the first `S` tokens verbatim. When the cache is full and another token
//! arrives, `compressed ++ incoming` (exactly `N - S` rows) is low-pass compressed to
//! `L` rows, leaving room for `N - L - S` new tokens before the next trigger. Keys are
//! stored before rotary encoding.

use std::io::{Read, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::codec::{self, Reader};
use crate::error::{Error, Result};
use crate::spectral::{Band, Compressor};
use crate::tensor::KvTensor;

/// Window `N`, retaining ratio `gamma` and sink count `S`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CachePolicyConfig {
    pub window: usize,
    pub gamma: f64,
    pub sinks: usize,
}

impl CachePolicyConfig {
    pub fn new(window: usize, gamma: f64, sinks: usize) -> Result<Self> {
        let cfg = Self {
            window,
            gamma,
            sinks,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::invalid("window must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.sinks >= self.window {
            return Err(Error::invalid(format!(
                "sink count {} must be below the window {}",
                self.sinks, self.window
            )));
        }
        if self.retain() < 1 {
            return Err(Error::invalid(format!(
                "gamma {} leaves no rows after compression of {} rows",
                self.gamma,
                self.window - self.sinks
            )));
        }
        if !self.is_identity() && self.admission_chunk() < 1 {
            return Err(Error::invalid(format!(
                "gamma {} retains every row of the window; use gamma = 1 for identity compression",
                self.gamma
            )));
        }
        Ok(())
    }

    /// `L = floor(gamma * (N - S))`.
    pub fn retain(&self) -> usize {
        // The epsilon keeps products like 0.29 * 100 from flooring to 28.
        (self.gamma * (self.window - self.sinks) as f64 + 1e-9).floor() as usize
    }

    /// Tokens admitted between consecutive triggers, `N - L - S`.
    pub fn admission_chunk(&self) -> usize {
        self.window - self.sinks - self.retain()
    }

    /// `gamma = 1` keeps every frequency, so compression never frees rows. Such caches
    /// run an identity compression on every admission past the window and grow without
    /// bound.
    pub fn is_identity(&self) -> bool {
        self.gamma >= 1.0
    }

    /// LLaMA-2-7B scale defaults: `N = 4096`, `gamma = 0.5`, `S = 4`.
    pub fn llama2() -> Self {
        Self {
            window: 4096,
            gamma: 0.5,
            sinks: 4,
        }
    }
}

/// Number of compressions after `tokens` tokens have been appended one at a time.
pub fn expected_compressions(tokens: usize, config: &CachePolicyConfig) -> usize {
    let n = config.window;
    if config.is_identity() {
        return tokens.saturating_sub(n);
    }
    if tokens <= n {
        0
    } else {
        1 + (tokens - n - 1) / config.admission_chunk()
    }
}

/// One trigger of the compression scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionEvent {
    /// 1-based ordinal of this compression.
    pub index: usize,
    /// Tokens already in the cache when the trigger fired (the overflowing token is not
    /// counted yet).
    pub tokens_seen: usize,
    /// Rows fed to the transform.
    pub block_rows: usize,
    pub sink_rows: usize,
    pub compressed_rows: usize,
    pub incoming_rows: usize,
}

/// Read-only snapshot of a cache, in attention order.
#[derive(Debug, Clone)]
pub struct CacheView<'a> {
    pub keys: Vec<&'a KvTensor>,
    pub values: Vec<&'a KvTensor>,
    /// Keys already carry rotary encoding (post-RoPE caching). Otherwise the key in
    /// cache row `i` is rotated with position `i` at attention time.
    pub keys_rotated: bool,
    /// Rotary position of the first token appended after this snapshot.
    pub next_position: usize,
}

impl<'a> CacheView<'a> {
    pub fn rows(&self) -> usize {
        self.keys.iter().map(|k| k.seq_len()).sum()
    }

    /// Region lengths in view order.
    pub fn region_lengths(&self) -> Vec<usize> {
        self.keys.iter().map(|k| k.seq_len()).collect()
    }

    /// Cache-local positions of the stored rows.
    pub fn positions(&self) -> Range<usize> {
        0..self.rows()
    }

    /// Key rows flattened across regions.
    pub fn key_rows(&self) -> impl Iterator<Item = &'a [f32]> + '_ {
        self.keys
            .iter()
            .flat_map(|t| (0..t.seq_len()).map(move |r| t.row(r)))
    }

    pub fn value_rows(&self) -> impl Iterator<Item = &'a [f32]> + '_ {
        self.values
            .iter()
            .flat_map(|t| (0..t.seq_len()).map(move |r| t.row(r)))
    }

    /// Largest rotary index an attention pass over `chunk` new rows will request.
    pub fn max_position(&self, chunk: usize) -> Option<usize> {
        let stored = if self.keys_rotated {
            None
        } else {
            self.rows().checked_sub(1)
        };
        let incoming = (self.next_position + chunk).checked_sub(1);
        match (stored, chunk > 0) {
            (s, true) => s.max(incoming),
            (s, false) => s,
        }
    }
}

/// Behaviour shared by every cache policy.
///
/// Callers must keep chunk appends within [`KvCache::room`] when they attend over a
/// snapshot first; [`KvCache::append`] itself splits at trigger points.
pub trait KvCache: Send {
    fn kv_heads(&self) -> usize;
    fn head_dim(&self) -> usize;
    fn rows(&self) -> usize;
    fn tokens_seen(&self) -> usize;
    fn compression_count(&self) -> usize;

    /// Tokens that can be appended before the next trigger.
    fn room(&self) -> usize;

    /// Fires the pending trigger if `room() == 0`, so that at least one token fits.
    fn make_room(&mut self) -> Result<Vec<CompressionEvent>>;

    /// Appends pre-RoPE keys and values, exactly as if one token at a time.
    fn append(&mut self, k: &KvTensor, v: &KvTensor) -> Result<Vec<CompressionEvent>> {
        check_pair(k, v, self.kv_heads(), self.head_dim())?;
        let mut events = Vec::new();
        let mut done = 0;
        while done < k.seq_len() {
            if self.room() == 0 {
                events.extend(self.make_room()?);
            }
            let take = self.room().min(k.seq_len() - done);
            self.admit(k, v, done, done + take)?;
            done += take;
        }
        Ok(events)
    }

    /// Stores rows `start..end` without triggering; the caller guarantees they fit.
    fn admit(&mut self, k: &KvTensor, v: &KvTensor, start: usize, end: usize) -> Result<()>;

    fn view(&self) -> CacheView<'_>;

    /// Highest rotary table size this cache needs, or `None` if positions are unbounded.
    fn rope_limit(&self) -> Option<usize>;
}

pub(crate) fn check_pair(k: &KvTensor, v: &KvTensor, heads: usize, head_dim: usize) -> Result<()> {
    if k.seq_len() != v.seq_len() {
        return Err(Error::DimensionMismatch {
            what: "value rows",
            expected: k.seq_len(),
            got: v.seq_len(),
        });
    }
    if k.is_empty() {
        return Err(Error::invalid("append needs at least one row"));
    }
    k.check_layout(heads, head_dim)?;
    v.check_layout(heads, head_dim)
}

/// Source tokens that entered the compressed region at one compression.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressedSegment {
    pub tokens: Range<usize>,
    /// Index of the compression that first absorbed these tokens.
    pub entered_at: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreqKvCache {
    config: CachePolicyConfig,
    compressor: Compressor,
    kv_heads: usize,
    head_dim: usize,
    sink_k: KvTensor,
    sink_v: KvTensor,
    compressed_k: KvTensor,
    compressed_v: KvTensor,
    incoming_k: KvTensor,
    incoming_v: KvTensor,
    tokens_seen: usize,
    compression_count: usize,
    // Identity mode only: a trigger already fired for the next token.
    primed: bool,
    segments: Vec<CompressedSegment>,
}

impl FreqKvCache {
    pub fn new(config: CachePolicyConfig, kv_heads: usize, head_dim: usize) -> Result<Self> {
        Self::with_compressor(config, kv_heads, head_dim, Compressor::LOW_PASS)
    }

    pub fn with_compressor(
        config: CachePolicyConfig,
        kv_heads: usize,
        head_dim: usize,
        compressor: Compressor,
    ) -> Result<Self> {
        config.validate()?;
        if kv_heads == 0 || head_dim == 0 {
            return Err(Error::invalid("kv heads and head dim must be positive"));
        }
        let empty = KvTensor::empty(kv_heads, head_dim);
        Ok(Self {
            config,
            compressor,
            kv_heads,
            head_dim,
            sink_k: empty.clone(),
            sink_v: empty.clone(),
            compressed_k: empty.clone(),
            compressed_v: empty.clone(),
            incoming_k: empty.clone(),
            incoming_v: empty,
            tokens_seen: 0,
            compression_count: 0,
            primed: false,
            segments: Vec::new(),
        })
    }

    pub fn config(&self) -> &CachePolicyConfig {
        &self.config
    }

    pub fn compressor(&self) -> Compressor {
        self.compressor
    }

    pub fn sinks(&self) -> (&KvTensor, &KvTensor) {
        (&self.sink_k, &self.sink_v)
    }

    pub fn compressed(&self) -> (&KvTensor, &KvTensor) {
        (&self.compressed_k, &self.compressed_v)
    }

    pub fn incoming(&self) -> (&KvTensor, &KvTensor) {
        (&self.incoming_k, &self.incoming_v)
    }

    pub fn segments(&self) -> &[CompressedSegment] {
        &self.segments
    }

    /// Original token span summarized by the compressed region.
    pub fn source_token_range(&self) -> Option<Range<usize>> {
        let first = self.segments.first()?;
        let last = self.segments.last()?;
        Some(first.tokens.start..last.tokens.end)
    }

    /// How many compressions token `token` has passed through.
    pub fn compressions_applied(&self, token: usize) -> usize {
        self.segments
            .iter()
            .find(|s| s.tokens.contains(&token))
            .map_or(0, |s| self.compression_count - s.entered_at + 1)
    }

    fn compress(&mut self) -> Result<CompressionEvent> {
        let block_k = KvTensor::concat(&[&self.compressed_k, &self.incoming_k])?;
        let block_v = KvTensor::concat(&[&self.compressed_v, &self.incoming_v])?;
        let rows = block_k.seq_len();
        let retain = if self.config.is_identity() {
            rows
        } else {
            self.config.retain()
        };
        self.compressed_k = self.compressor.apply(&block_k, retain)?;
        self.compressed_v = self.compressor.apply(&block_v, retain)?;

        let incoming_start = self.tokens_seen - self.incoming_k.seq_len();
        self.incoming_k = KvTensor::empty(self.kv_heads, self.head_dim);
        self.incoming_v = KvTensor::empty(self.kv_heads, self.head_dim);
        self.compression_count += 1;
        if incoming_start < self.tokens_seen {
            self.segments.push(CompressedSegment {
                tokens: incoming_start..self.tokens_seen,
                entered_at: self.compression_count,
            });
        }
        Ok(CompressionEvent {
            index: self.compression_count,
            tokens_seen: self.tokens_seen,
            block_rows: rows,
            sink_rows: self.sink_k.seq_len(),
            compressed_rows: self.compressed_k.seq_len(),
            incoming_rows: 0,
        })
    }

    /// Writes the full cache state as a versioned little-endian blob.
    pub fn dump(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&CACHE_MAGIC)?;
        codec::put_u32(w, CACHE_VERSION)?;
        codec::put_u64(w, self.config.window as u64)?;
        codec::put_f64(w, self.config.gamma)?;
        codec::put_u64(w, self.config.sinks as u64)?;
        codec::put_u8(w, matches!(self.compressor.band, Band::High) as u8)?;
        codec::put_u8(w, self.compressor.rescale as u8)?;
        codec::put_u32(w, self.kv_heads as u32)?;
        codec::put_u32(w, self.head_dim as u32)?;
        codec::put_u64(w, self.tokens_seen as u64)?;
        codec::put_u64(w, self.compression_count as u64)?;
        codec::put_u8(w, self.primed as u8)?;
        codec::put_u64(w, self.segments.len() as u64)?;
        for s in &self.segments {
            codec::put_u64(w, s.tokens.start as u64)?;
            codec::put_u64(w, s.tokens.end as u64)?;
            codec::put_u64(w, s.entered_at as u64)?;
        }
        for t in [&self.sink_k, &self.compressed_k, &self.incoming_k] {
            codec::put_u64(w, t.seq_len() as u64)?;
        }
        for t in [
            &self.sink_k,
            &self.sink_v,
            &self.compressed_k,
            &self.compressed_v,
            &self.incoming_k,
            &self.incoming_v,
        ] {
            codec::put_f32s(w, t.as_slice())?;
        }
        Ok(())
    }

    pub fn restore(r: impl Read) -> Result<Self> {
        let mut r = Reader::new(r, "cache state");
        let magic = r.bytes::<8>()?;
        if magic != CACHE_MAGIC {
            return Err(Error::BadMagic {
                expected: CACHE_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: CACHE_VERSION,
            });
        }
        let config = CachePolicyConfig {
            window: r.usize()?,
            gamma: r.f64()?,
            sinks: r.usize()?,
        };
        let compressor = Compressor {
            band: if r.u8()? == 1 { Band::High } else { Band::Low },
            rescale: r.u8()? == 1,
        };
        let kv_heads = r.u32()? as usize;
        let head_dim = r.u32()? as usize;
        let mut cache = Self::with_compressor(config, kv_heads, head_dim, compressor)?;
        cache.tokens_seen = r.usize()?;
        cache.compression_count = r.usize()?;
        cache.primed = r.u8()? == 1;
        let n_segments = r.usize()?;
        for _ in 0..n_segments {
            let start = r.usize()?;
            let end = r.usize()?;
            let entered_at = r.usize()?;
            cache.segments.push(CompressedSegment {
                tokens: start..end,
                entered_at,
            });
        }
        let lens = [r.usize()?, r.usize()?, r.usize()?];
        if lens.iter().sum::<usize>() > config.window && !config.is_identity() {
            return Err(Error::Malformed(format!(
                "region lengths {lens:?} exceed the window {}",
                config.window
            )));
        }
        let width = kv_heads * head_dim;
        let mut read = |rows: usize| -> Result<KvTensor> {
            KvTensor::from_vec(rows, kv_heads, head_dim, r.f32s(rows * width)?)
        };
        cache.sink_k = read(lens[0])?;
        cache.sink_v = read(lens[0])?;
        cache.compressed_k = read(lens[1])?;
        cache.compressed_v = read(lens[1])?;
        cache.incoming_k = read(lens[2])?;
        cache.incoming_v = read(lens[2])?;
        Ok(cache)
    }
}

const CACHE_MAGIC: [u8; 8] = *b"FKVCACHE";
const CACHE_VERSION: u32 = 1;

impl KvCache for FreqKvCache {
    fn kv_heads(&self) -> usize {
        self.kv_heads
    }

    fn head_dim(&self) -> usize {
        self.head_dim
    }

    fn rows(&self) -> usize {
        self.sink_k.seq_len() + self.compressed_k.seq_len() + self.incoming_k.seq_len()
    }

    fn tokens_seen(&self) -> usize {
        self.tokens_seen
    }

    fn compression_count(&self) -> usize {
        self.compression_count
    }

    fn room(&self) -> usize {
        let rows = self.rows();
        if rows < self.config.window {
            self.config.window - rows
        } else if self.primed {
            1
        } else {
            0
        }
    }

    fn make_room(&mut self) -> Result<Vec<CompressionEvent>> {
        if self.room() > 0 {
            return Ok(Vec::new());
        }
        let event = self.compress()?;
        if self.config.is_identity() {
            self.primed = true;
        }
        Ok(vec![event])
    }

    fn admit(&mut self, k: &KvTensor, v: &KvTensor, start: usize, end: usize) -> Result<()> {
        debug_assert!(end - start <= self.room());
        let to_sink = (self.config.sinks - self.sink_k.seq_len()).min(end - start);
        self.sink_k.extend_rows(k, start, start + to_sink);
        self.sink_v.extend_rows(v, start, start + to_sink);
        self.incoming_k.extend_rows(k, start + to_sink, end);
        self.incoming_v.extend_rows(v, start + to_sink, end);
        self.tokens_seen += end - start;
        self.primed = false;
        Ok(())
    }

    fn view(&self) -> CacheView<'_> {
        CacheView {
            keys: vec![&self.sink_k, &self.compressed_k, &self.incoming_k],
            values: vec![&self.sink_v, &self.compressed_v, &self.incoming_v],
            keys_rotated: false,
            next_position: self.rows(),
        }
    }

    fn rope_limit(&self) -> Option<usize> {
        if self.config.is_identity() {
            None
        } else {
            Some(self.config.window)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize, offset: usize) -> KvTensor {
        KvTensor::from_fn(n, 1, 2, |r, _, c| ((r + offset) * 2 + c) as f32)
    }

    fn small() -> CachePolicyConfig {
        CachePolicyConfig::new(16, 0.5, 2).unwrap()
    }

    #[test]
    fn derived_lengths() {
        let cfg = CachePolicyConfig::llama2();
        assert_eq!(cfg.retain(), 2046);
        assert_eq!(cfg.admission_chunk(), 2046);
        assert_eq!(small().retain(), 7);
        assert_eq!(small().admission_chunk(), 7);
        assert_eq!(CachePolicyConfig::new(100, 0.29, 0).unwrap().retain(), 29);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(CachePolicyConfig::new(0, 0.5, 0).is_err());
        assert!(CachePolicyConfig::new(8, 0.0, 0).is_err());
        assert!(CachePolicyConfig::new(8, 1.5, 0).is_err());
        assert!(CachePolicyConfig::new(8, f64::NAN, 0).is_err());
        assert!(CachePolicyConfig::new(8, 0.5, 8).is_err());
        assert!(CachePolicyConfig::new(8, 0.05, 2).is_err());
        assert!(CachePolicyConfig::new(8, 1.0, 7).is_ok());
    }

    #[test]
    fn closed_form_counts() {
        let cfg = CachePolicyConfig::llama2();
        assert_eq!(expected_compressions(4095, &cfg), 0);
        assert_eq!(expected_compressions(4096, &cfg), 0);
        assert_eq!(expected_compressions(4097, &cfg), 1);
        assert_eq!(expected_compressions(8192, &cfg), 3);
        assert_eq!(expected_compressions(262_144, &cfg), 127);
    }

    #[test]
    fn below_window_is_bit_exact() {
        let mut cache = FreqKvCache::new(small(), 1, 2).unwrap();
        let k = rows(10, 0);
        let v = rows(10, 50);
        assert!(cache.append(&k, &v).unwrap().is_empty());
        let view = cache.view();
        assert_eq!(view.region_lengths(), vec![2, 0, 8]);
        let keys: Vec<f32> = view.key_rows().flatten().copied().collect();
        assert_eq!(keys, k.as_slice());
        let vals: Vec<f32> = view.value_rows().flatten().copied().collect();
        assert_eq!(vals, v.as_slice());
    }

    #[test]
    fn trigger_fires_on_overflowing_token() {
        let mut cache = FreqKvCache::new(small(), 1, 2).unwrap();
        assert!(cache.append(&rows(16, 0), &rows(16, 0)).unwrap().is_empty());
        assert_eq!(cache.room(), 0);
        let events = cache.append(&rows(1, 16), &rows(1, 16)).unwrap();
        assert_eq!(events.len(), 1);
        let e = events[0];
        assert_eq!(e.tokens_seen, 16);
        assert_eq!(e.block_rows, 14);
        assert_eq!((e.sink_rows, e.compressed_rows, e.incoming_rows), (2, 7, 0));
        assert_eq!(cache.rows(), 10);
        assert_eq!(cache.source_token_range(), Some(2..16));
    }

    #[test]
    fn empty_or_mismatched_appends_fail() {
        let mut cache = FreqKvCache::new(small(), 1, 2).unwrap();
        assert!(cache.append(&rows(0, 0), &rows(0, 0)).is_err());
        assert!(cache.append(&rows(2, 0), &rows(3, 0)).is_err());
        let wrong = KvTensor::zeros(2, 2, 2);
        assert!(matches!(
            cache.append(&wrong, &wrong),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn identity_mode_grows_and_counts() {
        let cfg = CachePolicyConfig::new(8, 1.0, 2).unwrap();
        let mut cache = FreqKvCache::new(cfg, 1, 2).unwrap();
        let events = cache.append(&rows(12, 0), &rows(12, 0)).unwrap();
        assert_eq!(events.len(), 4);
        assert_eq!(events.len(), expected_compressions(12, &cfg));
        assert_eq!(cache.rows(), 12);
        assert_eq!(cache.rope_limit(), None);
    }

    #[test]
    fn dump_restore_round_trip() {
        let mut cache = FreqKvCache::new(small(), 1, 2).unwrap();
        cache.append(&rows(40, 0), &rows(40, 3)).unwrap();
        let mut blob = Vec::new();
        cache.dump(&mut blob).unwrap();
        let back = FreqKvCache::restore(blob.as_slice()).unwrap();
        assert_eq!(back, cache);

        let mut bad = blob.clone();
        bad[0] = b'X';
        assert!(matches!(
            FreqKvCache::restore(bad.as_slice()),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            FreqKvCache::restore(&blob[..blob.len() - 3]),
            Err(Error::Truncated(_))
        ));
    }
}
