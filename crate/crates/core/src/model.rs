//! Toy LLaMA-style decoder: token embeddings, pre-norm blocks with RMSNorm, grouped-query
//! attention over a pluggable KV cache, SiLU-gated feed-forward, and an output head.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{attend, AttentionInputs, Rope};
use crate::baselines::{CachePolicy, PolicyKind};
use crate::cache::{CachePolicyConfig, CompressionEvent, KvCache};
use crate::codec::{self, Reader};
use crate::error::{Error, Result};
use crate::tensor::KvTensor;

/// Name of the PRNG behind [`WeightStore::init_random`] and every seeded sampler.
pub const PRNG_NAME: &str = "ChaCha8Rng (rand_chacha 0.9, seed_from_u64)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub rope_base: f64,
    /// Context window `N`; also the default cache window.
    pub context_window: usize,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default)]
    pub tie_embeddings: bool,
}

fn default_norm_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// Desk-scale preset: `N = 256`, 4 layers, 4 query heads over 2 kv heads.
    pub fn desk() -> Self {
        Self {
            vocab_size: 512,
            n_layers: 4,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 32,
            hidden_dim: 128,
            ffn_dim: 344,
            rope_base: 10000.0,
            context_window: 256,
            norm_eps: 1e-5,
            tie_embeddings: false,
        }
    }

    /// LLaMA-2-7B dimensions, for cost modelling only.
    pub fn llama2_7b() -> Self {
        Self {
            vocab_size: 32000,
            n_layers: 32,
            n_heads: 32,
            n_kv_heads: 32,
            head_dim: 128,
            hidden_dim: 4096,
            ffn_dim: 11008,
            rope_base: 10000.0,
            context_window: 4096,
            norm_eps: 1e-5,
            tie_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.hidden_dim != self.n_heads * self.head_dim {
            return Err(Error::invalid(format!(
                "hidden_dim {} must equal n_heads * head_dim = {}",
                self.hidden_dim,
                self.n_heads * self.head_dim
            )));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::invalid(format!(
                "n_kv_heads {} must divide n_heads {}",
                self.n_kv_heads, self.n_heads
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::invalid("head_dim must be even for rotary encoding"));
        }
        if self.context_window < 8 {
            return Err(Error::invalid("context_window must be at least 8"));
        }
        if !(self.rope_base > 0.0) || !(self.norm_eps > 0.0) {
            return Err(Error::invalid("rope_base and norm_eps must be positive"));
        }
        Ok(())
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Every tensor the config requires, with its shape, in file order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, kv, f) = (self.hidden_dim, self.kv_dim(), self.ffn_dim);
        let mut shapes = vec![("tok_embeddings".to_string(), vec![self.vocab_size, h])];
        for l in 0..self.n_layers {
            let p = format!("layers.{l}");
            shapes.extend([
                (format!("{p}.attention_norm"), vec![h]),
                (format!("{p}.attention.wq"), vec![h, h]),
                (format!("{p}.attention.wk"), vec![kv, h]),
                (format!("{p}.attention.wv"), vec![kv, h]),
                (format!("{p}.attention.wo"), vec![h, h]),
                (format!("{p}.ffn_norm"), vec![h]),
                (format!("{p}.feed_forward.w1"), vec![f, h]),
                (format!("{p}.feed_forward.w2"), vec![h, f]),
                (format!("{p}.feed_forward.w3"), vec![f, h]),
            ]);
        }
        shapes.push(("norm".to_string(), vec![h]));
        if !self.tie_embeddings {
            shapes.push(("output".to_string(), vec![self.vocab_size, h]));
        }
        shapes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named single-precision tensors, row-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightStore {
    tensors: BTreeMap<String, NamedTensor>,
}

const WEIGHT_MAGIC: [u8; 8] = *b"FKVWEIGH";
const WEIGHT_VERSION: u32 = 1;

impl WeightStore {
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "tensor data",
                expected,
                got: data.len(),
            });
        }
        self.tensors.insert(name.into(), NamedTensor { shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NamedTensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NamedTensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Deterministic initialization: norms at one, everything else standard normal
    /// scaled by `1/sqrt(fan_in)` (embeddings unscaled).
    pub fn init_random(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = WeightStore::default();
        for (name, shape) in config.tensor_shapes() {
            let count: usize = shape.iter().product();
            let data = if shape.len() == 1 {
                vec![1.0; count]
            } else {
                let scale = if name == "tok_embeddings" {
                    1.0
                } else {
                    1.0 / (shape[1] as f64).sqrt()
                };
                (0..count)
                    .map(|_| (rng.sample::<f64, _>(StandardNormal) * scale) as f32)
                    .collect()
            };
            store.insert(name, shape, data)?;
        }
        Ok(store)
    }

    /// Checks names, shapes and finiteness against `config`.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for (name, shape) in config.tensor_shapes() {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape != shape {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape,
                    found: t.shape.clone(),
                });
            }
            if !t.data.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(name));
            }
        }
        Ok(())
    }

    /// Binary layout (all little-endian):
    ///
    /// ```text
    /// magic "FKVWEIGH" | version u32 | tensor count u32
    /// per tensor: name len u16 | name utf-8 | ndim u8 | dims u32 * ndim | element offset u64
    /// payload: f32 values, tensors back to back in directory order
    /// ```
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&WEIGHT_MAGIC)?;
        codec::put_u32(w, WEIGHT_VERSION)?;
        codec::put_u32(w, self.tensors.len() as u32)?;
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            codec::put_u8(w, t.shape.len() as u8)?;
            for d in &t.shape {
                codec::put_u32(w, *d as u32)?;
            }
            codec::put_u64(w, offset)?;
            offset += t.data.len() as u64;
        }
        for t in self.tensors.values() {
            codec::put_f32s(w, &t.data)?;
        }
        Ok(())
    }

    pub fn read(r: impl Read) -> Result<Self> {
        let mut r = Reader::new(r, "weight file");
        let magic = r.bytes::<8>()?;
        if magic != WEIGHT_MAGIC {
            return Err(Error::BadMagic {
                expected: WEIGHT_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != WEIGHT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: WEIGHT_VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut directory = Vec::with_capacity(count.min(1 << 16));
        let mut expected_offset = 0u64;
        for _ in 0..count {
            let len = r.u16()? as usize;
            let mut name = vec![0u8; len];
            r.fill(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            if offset != expected_offset {
                return Err(Error::Malformed(format!(
                    "tensor `{name}` starts at element {offset}, expected {expected_offset}"
                )));
            }
            expected_offset += shape.iter().product::<usize>() as u64;
            directory.push((name, shape));
        }
        let mut store = WeightStore::default();
        for (name, shape) in directory {
            let data = r.f32s(shape.iter().product())?;
            store.insert(name, shape, data)?;
        }
        if !r.is_at_end()? {
            return Err(Error::Malformed("trailing bytes after payload".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

/// Everything needed to reproduce a run on one platform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: Option<u64>,
    pub prng: String,
    pub config_hash: String,
    pub policy: CachePolicy,
    pub version: String,
}

impl RunMetadata {
    pub fn new(config: &ModelConfig, policy: CachePolicy, seed: Option<u64>) -> Self {
        Self {
            seed,
            prng: PRNG_NAME.to_string(),
            config_hash: config.hash(),
            policy,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

struct Layer {
    attention_norm: Vec<f32>,
    wq: Vec<f32>,
    wk: Vec<f32>,
    wv: Vec<f32>,
    wo: Vec<f32>,
    ffn_norm: Vec<f32>,
    w1: Vec<f32>,
    w2: Vec<f32>,
    w3: Vec<f32>,
}

/// Validated weights in a form the forward pass can index directly.
pub struct Model {
    config: ModelConfig,
    embeddings: Vec<f32>,
    layers: Vec<Layer>,
    norm: Vec<f32>,
    output: Option<Vec<f32>>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("config", &self.config).finish()
    }
}

impl Model {
    pub fn new(config: ModelConfig, store: &WeightStore) -> Result<Self> {
        config.validate()?;
        store.validate(&config)?;
        let take = |name: &str| store.get(name).map(|t| t.data.clone()).expect("validated");
        let layers = (0..config.n_layers)
            .map(|l| Layer {
                attention_norm: take(&format!("layers.{l}.attention_norm")),
                wq: take(&format!("layers.{l}.attention.wq")),
                wk: take(&format!("layers.{l}.attention.wk")),
                wv: take(&format!("layers.{l}.attention.wv")),
                wo: take(&format!("layers.{l}.attention.wo")),
                ffn_norm: take(&format!("layers.{l}.ffn_norm")),
                w1: take(&format!("layers.{l}.feed_forward.w1")),
                w2: take(&format!("layers.{l}.feed_forward.w2")),
                w3: take(&format!("layers.{l}.feed_forward.w3")),
            })
            .collect();
        Ok(Self {
            embeddings: take("tok_embeddings"),
            norm: take("norm"),
            output: (!config.tie_embeddings).then(|| take("output")),
            layers,
            config,
        })
    }

    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let store = WeightStore::init_random(&config, seed)?;
        Self::new(config, &store)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Default cache policy config for this model: window = context window.
    pub fn policy(&self, kind: PolicyKind, gamma: f64, sinks: usize) -> Result<CachePolicy> {
        Ok(CachePolicy::new(
            kind,
            CachePolicyConfig::new(self.config.context_window, gamma, sinks)?,
        ))
    }

    pub fn session(&self, policy: CachePolicy) -> Result<Session<'_>> {
        Session::new(self, policy)
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Vec<f32>> {
        let h = self.config.hidden_dim;
        let mut out = Vec::with_capacity(tokens.len() * h);
        for &t in tokens {
            let t_idx = t as usize;
            if t_idx >= self.config.vocab_size {
                return Err(Error::InvalidToken {
                    token: t,
                    vocab_size: self.config.vocab_size,
                });
            }
            out.extend_from_slice(&self.embeddings[t_idx * h..(t_idx + 1) * h]);
        }
        Ok(out)
    }

    fn logits(&self, hidden_row: &[f32]) -> Vec<f32> {
        let normed = rms_norm(hidden_row, &self.norm, self.config.norm_eps);
        let head = self.output.as_deref().unwrap_or(&self.embeddings);
        matvec(head, &normed, self.config.vocab_size)
    }

    /// Pre-RoPE keys and values of every layer for one stream, computed with an
    /// uncompressed cache. Row count is the stream length.
    pub fn capture_kv(&self, tokens: &[u32]) -> Result<Vec<(KvTensor, KvTensor)>> {
        let hidden = self.embed(tokens)?;
        self.capture_kv_from_hidden(hidden)
    }

    /// Like [`Model::capture_kv`] but starts from layer-0 input rows instead of token ids.
    pub fn capture_kv_from_hidden(&self, hidden: Vec<f32>) -> Result<Vec<(KvTensor, KvTensor)>> {
        if hidden.is_empty() || hidden.len() % self.config.hidden_dim != 0 {
            return Err(Error::invalid("hidden rows must be a nonempty multiple of hidden_dim"));
        }
        let rows = hidden.len() / self.config.hidden_dim;
        let policy = CachePolicy::new(
            PolicyKind::Full,
            CachePolicyConfig::new(rows.max(2), 1.0, 0)?,
        );
        let mut session = self.session(policy)?;
        let mut captured = Vec::with_capacity(self.config.n_layers);
        session.run_chunk(hidden, false, Some(&mut captured))?;
        Ok(captured)
    }

    /// Logits at every position from a cache-free causal forward pass with absolute
    /// positions. Independent of the cache and chunking machinery; used as a reference.
    pub fn reference_logits(&self, tokens: &[u32]) -> Result<Vec<Vec<f32>>> {
        let cfg = &self.config;
        let (h, d, kv) = (cfg.hidden_dim, cfg.head_dim, cfg.kv_dim());
        let t = tokens.len();
        let rope = Rope::unbounded(d, cfg.rope_base, t)?;
        let mut x = self.embed(tokens)?;
        let group = cfg.n_heads / cfg.n_kv_heads;
        let scale = 1.0 / (d as f64).sqrt();
        for layer in &self.layers {
            let mut q = Vec::with_capacity(t * h);
            let mut k = Vec::with_capacity(t * kv);
            let mut v = Vec::with_capacity(t * kv);
            for (p, row) in x.chunks(h).enumerate() {
                let n = rms_norm(row, &layer.attention_norm, cfg.norm_eps);
                let mut qr = matvec(&layer.wq, &n, h);
                let mut kr = matvec(&layer.wk, &n, kv);
                for head in qr.chunks_mut(d).chain(kr.chunks_mut(d)) {
                    rope.rotate(head, p)?;
                }
                q.extend(qr);
                k.extend(kr);
                v.extend(matvec(&layer.wv, &n, kv));
            }
            let mut attn = vec![0f32; t * h];
            for i in 0..t {
                for head in 0..cfg.n_heads {
                    let g = head / group;
                    let qv = &q[i * h + head * d..][..d];
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| {
                            let kv_row = &k[j * kv + g * d..][..d];
                            qv.iter().zip(kv_row).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>()
                                * scale
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for c in 0..d {
                        let acc: f64 = (0..=i).map(|j| e[j] / z * v[j * kv + g * d + c] as f64).sum();
                        attn[i * h + head * d + c] = acc as f32;
                    }
                }
            }
            for (row, a) in x.chunks_mut(h).zip(attn.chunks(h)) {
                add_assign(row, &matvec(&layer.wo, a, h));
                let n = rms_norm(row, &layer.ffn_norm, cfg.norm_eps);
                add_assign(row, &ffn(layer, &n, cfg.ffn_dim, h));
            }
        }
        Ok(x.chunks(h).map(|row| self.logits(row)).collect())
    }
}

/// One decoding session: a cache per layer plus the bookkeeping the analyses need.
pub struct Session<'m> {
    model: &'m Model,
    policy: CachePolicy,
    caches: Vec<Box<dyn KvCache>>,
    rope: Rope,
    events: Vec<CompressionEvent>,
    max_position: Option<usize>,
    max_rows: usize,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model, policy: CachePolicy) -> Result<Self> {
        let cfg = model.config();
        let caches = (0..cfg.n_layers)
            .map(|_| policy.build(cfg.n_kv_heads, cfg.head_dim, cfg.rope_base))
            .collect::<Result<Vec<_>>>()?;
        let rope = match caches[0].rope_limit() {
            Some(limit) => Rope::new(cfg.head_dim, cfg.rope_base, limit)?,
            None => Rope::unbounded(cfg.head_dim, cfg.rope_base, policy.config.window)?,
        };
        Ok(Self {
            model,
            policy,
            caches,
            rope,
            events: Vec::new(),
            max_position: None,
            max_rows: 0,
        })
    }

    pub fn policy(&self) -> &CachePolicy {
        &self.policy
    }

    pub fn caches(&self) -> &[Box<dyn KvCache>] {
        &self.caches
    }

    /// Compression events of layer 0 (every layer compresses at the same points).
    pub fn events(&self) -> &[CompressionEvent] {
        &self.events
    }

    pub fn tokens_seen(&self) -> usize {
        self.caches[0].tokens_seen()
    }

    /// Largest rotary index requested so far, by queries or keys.
    pub fn max_position(&self) -> Option<usize> {
        self.max_position
    }

    /// Largest per-layer cache size observed after any step.
    pub fn max_rows(&self) -> usize {
        self.max_rows
    }

    /// Runs one token through every layer and returns next-token logits.
    pub fn decode_step(&mut self, token: u32) -> Result<Vec<f32>> {
        self.prefill(&[token])
    }

    /// Processes `tokens` in the largest chunks that fit between compression triggers
    /// and returns the logits of the last token.
    pub fn prefill(&mut self, tokens: &[u32]) -> Result<Vec<f32>> {
        self.prefill_partitioned(tokens, &[tokens.len()])
    }

    /// Processes `tokens` in the given chunk sizes, further split at trigger points.
    /// `parts` must sum to `tokens.len()`.
    pub fn prefill_partitioned(&mut self, tokens: &[u32], parts: &[usize]) -> Result<Vec<f32>> {
        if tokens.is_empty() {
            return Err(Error::invalid("prefill needs at least one token"));
        }
        if parts.iter().sum::<usize>() != tokens.len() || parts.contains(&0) {
            return Err(Error::invalid("chunk sizes must be positive and sum to the token count"));
        }
        let mut logits = Vec::new();
        let mut start = 0;
        for &part in parts {
            let end = start + part;
            let mut i = start;
            while i < end {
                self.make_room()?;
                let take = self.caches[0].room().min(end - i);
                let hidden = self.model.embed(&tokens[i..i + take])?;
                let last = i + take == tokens.len();
                logits = self.run_chunk(hidden, last, None)?;
                i += take;
            }
            start = end;
        }
        Ok(logits)
    }

    fn make_room(&mut self) -> Result<()> {
        if self.caches[0].room() > 0 {
            return Ok(());
        }
        for (l, cache) in self.caches.iter_mut().enumerate() {
            let events = cache.make_room()?;
            if l == 0 {
                self.events.extend(events);
            }
        }
        Ok(())
    }

    /// Forward of one chunk that fits in the current room. Returns last-row logits when
    /// asked.
    fn run_chunk(
        &mut self,
        mut x: Vec<f32>,
        want_logits: bool,
        mut capture: Option<&mut Vec<(KvTensor, KvTensor)>>,
    ) -> Result<Vec<f32>> {
        let model = self.model;
        let cfg = model.config();
        let (h, d, kv) = (cfg.hidden_dim, cfg.head_dim, cfg.kv_dim());
        let rows = x.len() / h;
        for (layer, cache) in model.layers.iter().zip(self.caches.iter_mut()) {
            let mut q = Vec::with_capacity(rows * h);
            let mut k = Vec::with_capacity(rows * kv);
            let mut v = Vec::with_capacity(rows * kv);
            for row in x.chunks(h) {
                let n = rms_norm(row, &layer.attention_norm, cfg.norm_eps);
                q.extend(matvec(&layer.wq, &n, h));
                k.extend(matvec(&layer.wk, &n, kv));
                v.extend(matvec(&layer.wv, &n, kv));
            }
            let q = KvTensor::from_vec(rows, cfg.n_heads, d, q)?;
            let k = KvTensor::from_vec(rows, cfg.n_kv_heads, d, k)?;
            let v = KvTensor::from_vec(rows, cfg.n_kv_heads, d, v)?;

            let out = {
                let view = cache.view();
                self.max_position = self.max_position.max(view.max_position(rows));
                attend(
                    &AttentionInputs {
                        queries: &q,
                        cache: &view,
                        keys: &k,
                        values: &v,
                    },
                    &self.rope,
                )?
            };
            let events = cache.append(&k, &v)?;
            debug_assert!(events.is_empty(), "chunk crossed a trigger point");
            if let Some(c) = capture.as_deref_mut() {
                c.push((k, v));
            }

            for (row, a) in x.chunks_mut(h).zip(out.as_slice().chunks(h)) {
                add_assign(row, &matvec(&layer.wo, a, h));
                let n = rms_norm(row, &layer.ffn_norm, cfg.norm_eps);
                add_assign(row, &ffn(layer, &n, cfg.ffn_dim, h));
            }
        }
        self.max_rows = self.max_rows.max(self.caches[0].rows());
        Ok(if want_logits {
            model.logits(&x[(rows - 1) * h..])
        } else {
            Vec::new()
        })
    }

    /// Feeds `prompt`, then generates `max_new` tokens, feeding each one back so the
    /// caches end up holding the whole sequence. Greedy when `temperature` is zero,
    /// otherwise softmax sampling seeded with `seed`.
    pub fn generate(
        &mut self,
        prompt: &[u32],
        max_new: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logits = self.prefill(prompt)?;
        let mut out = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            let next = if temperature > 0.0 {
                sample(&logits, temperature, &mut rng)
            } else {
                argmax(&logits)
            };
            out.push(next);
            logits = self.decode_step(next)?;
        }
        Ok(out)
    }
}

pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best as u32
}

fn sample(logits: &[f32], temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let w: Vec<f64> = logits
        .iter()
        .map(|l| ((*l as f64 - m) / temperature).exp())
        .collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i as u32;
        }
        u -= wi;
    }
    (w.len() - 1) as u32
}

fn rms_norm(x: &[f32], gain: &[f32], eps: f64) -> Vec<f32> {
    let ms = x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(gain).map(|(v, g)| (*v as f64 * inv) as f32 * g).collect()
}

fn matvec(w: &[f32], x: &[f32], out_dim: usize) -> Vec<f32> {
    w.chunks_exact(x.len())
        .take(out_dim)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn ffn(layer: &Layer, x: &[f32], ffn_dim: usize, hidden: usize) -> Vec<f32> {
    let gate = matvec(&layer.w1, x, ffn_dim);
    let up = matvec(&layer.w3, x, ffn_dim);
    let act: Vec<f32> = gate
        .iter()
        .zip(&up)
        .map(|(g, u)| g / (1.0 + (-g).exp()) * u)
        .collect();
    matvec(&layer.w2, &act, hidden)
}

fn add_assign(x: &mut [f32], y: &[f32]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 32,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 4,
            hidden_dim: 16,
            ffn_dim: 24,
            rope_base: 10000.0,
            context_window: 16,
            norm_eps: 1e-5,
            tie_embeddings: false,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::llama2_7b().validate().is_ok());
        let mut c = tiny();
        c.n_kv_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.hidden_dim = 20;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.context_window = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = WeightStore::init_random(&tiny(), 3).unwrap();
        let b = WeightStore::init_random(&tiny(), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_token_is_rejected() {
        let model = Model::random(tiny(), 1).unwrap();
        let mut s = model.session(model.policy(PolicyKind::FreqKv, 0.5, 2).unwrap()).unwrap();
        assert!(matches!(
            s.decode_step(32),
            Err(Error::InvalidToken { token: 32, vocab_size: 32 })
        ));
    }

    #[test]
    fn tied_embeddings_drop_output_tensor() {
        let mut c = tiny();
        c.tie_embeddings = true;
        let store = WeightStore::init_random(&c, 0).unwrap();
        assert!(store.get("output").is_none());
        let model = Model::new(c, &store).unwrap();
        assert_eq!(model.reference_logits(&[1, 2]).unwrap()[1].len(), 32);
    }

    #[test]
    fn weights_round_trip_and_errors() {
        let store = WeightStore::init_random(&tiny(), 9).unwrap();
        let mut blob = Vec::new();
        store.write(&mut blob).unwrap();
        assert_eq!(WeightStore::read(blob.as_slice()).unwrap(), store);

        let mut bad = blob.clone();
        bad[1] ^= 0xff;
        assert!(matches!(WeightStore::read(bad.as_slice()), Err(Error::BadMagic { .. })));

        let mut bad = blob.clone();
        bad[8] = 9;
        assert!(matches!(
            WeightStore::read(bad.as_slice()),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));

        assert!(matches!(
            WeightStore::read(&blob[..blob.len() - 1]),
            Err(Error::Truncated(_))
        ));

        let mut other = tiny();
        other.ffn_dim = 20;
        match store.validate(&other) {
            Err(Error::ShapeMismatch { name, .. }) => assert!(name.contains("feed_forward")),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let model = Model::random(tiny(), 5).unwrap();
        let policy = model.policy(PolicyKind::FreqKv, 0.5, 2).unwrap();
        let a = model.session(policy).unwrap().generate(&[1, 2, 3], 40, 0.0, 0).unwrap();
        let b = model.session(policy).unwrap().generate(&[1, 2, 3], 40, 0.0, 0).unwrap();
        assert_eq!(a, b);
        let c = model.session(policy).unwrap().generate(&[1, 2, 3], 40, 0.8, 11).unwrap();
        let d = model.session(policy).unwrap().generate(&[1, 2, 3], 40, 0.8, 11).unwrap();
        assert_eq!(c, d);
    }
}
