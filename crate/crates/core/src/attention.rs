//! Rotary position embedding and causal attention over a cache snapshot plus the
//! current chunk.
//!
//! Cached keys are stored without rotary encoding. At attention time cache row `i` is
//! rotated with position `i`, and chunk row `j` with `rows + j`, so every index stays
//! inside the cache window no matter how long the stream has run.

use crate::cache::CacheView;
use crate::error::{Error, Result};
use crate::tensor::KvTensor;

/// Rotary tables for one head dimension.
#[derive(Debug, Clone)]
pub struct Rope {
    head_dim: usize,
    base: f64,
    limit: Option<usize>,
    inv_freq: Vec<f64>,
    // [position][pair] for positions below the table length
    cos: Vec<f64>,
    sin: Vec<f64>,
    table_len: usize,
}

impl Rope {
    /// Tables covering positions `0..limit`; larger indices are rejected.
    pub fn new(head_dim: usize, base: f64, limit: usize) -> Result<Self> {
        Self::build(head_dim, base, Some(limit), limit)
    }

    /// Rope that accepts any position. Used by policies whose positions grow with the
    /// stream (full cache, post-RoPE caching).
    pub fn unbounded(head_dim: usize, base: f64, precompute: usize) -> Result<Self> {
        Self::build(head_dim, base, None, precompute)
    }

    fn build(head_dim: usize, base: f64, limit: Option<usize>, table_len: usize) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::invalid(format!(
                "rotary head dim must be even and positive, got {head_dim}"
            )));
        }
        if base <= 0.0 || !base.is_finite() {
            return Err(Error::invalid("rotary base must be positive"));
        }
        let half = head_dim / 2;
        let inv_freq: Vec<f64> = (0..half)
            .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
            .collect();
        let mut cos = Vec::with_capacity(table_len * half);
        let mut sin = Vec::with_capacity(table_len * half);
        for p in 0..table_len {
            for f in &inv_freq {
                let angle = p as f64 * f;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Ok(Self {
            head_dim,
            base,
            limit,
            inv_freq,
            cos,
            sin,
            table_len,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn limit(&self) -> Option<usize> {
        self.limit
    }

    pub fn check(&self, position: usize) -> Result<()> {
        match self.limit {
            Some(limit) if position >= limit => Err(Error::PositionOutOfRange { position, limit }),
            _ => Ok(()),
        }
    }

    /// Rotates one head vector in place.
    pub fn rotate(&self, x: &mut [f32], position: usize) -> Result<()> {
        self.check(position)?;
        debug_assert_eq!(x.len(), self.head_dim);
        let half = self.head_dim / 2;
        for i in 0..half {
            let (c, s) = if position < self.table_len {
                (self.cos[position * half + i], self.sin[position * half + i])
            } else {
                let angle = position as f64 * self.inv_freq[i];
                (angle.cos(), angle.sin())
            };
            let a = x[2 * i] as f64;
            let b = x[2 * i + 1] as f64;
            x[2 * i] = (a * c - b * s) as f32;
            x[2 * i + 1] = (a * s + b * c) as f32;
        }
        Ok(())
    }

    /// Rotates every head of row `r` of `states` with `positions[r]`.
    pub fn apply(&self, states: &KvTensor, positions: &[usize]) -> Result<KvTensor> {
        if positions.len() != states.seq_len() {
            return Err(Error::DimensionMismatch {
                what: "rotary positions",
                expected: states.seq_len(),
                got: positions.len(),
            });
        }
        states.check_layout(states.n_heads(), self.head_dim)?;
        let mut data = states.as_slice().to_vec();
        for (row, &pos) in data.chunks_mut(states.row_width()).zip(positions) {
            for head in row.chunks_mut(self.head_dim) {
                self.rotate(head, pos)?;
            }
        }
        KvTensor::from_vec(states.seq_len(), states.n_heads(), self.head_dim, data)
    }
}

/// Everything one attention pass reads.
#[derive(Debug, Clone, Copy)]
pub struct AttentionInputs<'a> {
    /// `[chunk × n_heads × head_dim]`, not yet rotated.
    pub queries: &'a KvTensor,
    pub cache: &'a CacheView<'a>,
    /// Chunk keys and values, `[chunk × n_kv_heads × head_dim]`, keys not yet rotated.
    pub keys: &'a KvTensor,
    pub values: &'a KvTensor,
}

struct Prepared {
    queries: Vec<f32>,
    keys: Vec<f32>,
    values: Vec<f32>,
    cached_rows: usize,
    n_heads: usize,
    kv_heads: usize,
    head_dim: usize,
    scale: f64,
}

impl Prepared {
    fn new(inputs: &AttentionInputs<'_>, rope: &Rope) -> Result<Self> {
        let AttentionInputs {
            queries,
            cache,
            keys,
            values,
        } = *inputs;
        let chunk = queries.seq_len();
        if chunk == 0 {
            return Err(Error::invalid("attention chunk must be nonempty"));
        }
        for (what, t) in [("chunk keys", keys), ("chunk values", values)] {
            if t.seq_len() != chunk {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: chunk,
                    got: t.seq_len(),
                });
            }
        }
        let head_dim = queries.head_dim();
        let n_heads = queries.n_heads();
        let kv_heads = keys.n_heads();
        if head_dim != rope.head_dim() {
            return Err(Error::DimensionMismatch {
                what: "head dim",
                expected: rope.head_dim(),
                got: head_dim,
            });
        }
        keys.check_layout(kv_heads, head_dim)?;
        values.check_layout(kv_heads, head_dim)?;
        if kv_heads == 0 || n_heads % kv_heads != 0 {
            return Err(Error::invalid(format!(
                "{n_heads} query heads cannot be grouped over {kv_heads} kv heads"
            )));
        }
        for t in cache.keys.iter().chain(&cache.values) {
            t.check_layout(kv_heads, head_dim)?;
        }

        let cached_rows = cache.rows();
        let first = cache.next_position;
        if let Some(p) = cache.max_position(chunk) {
            rope.check(p)?;
        }

        let mut q = queries.as_slice().to_vec();
        for (j, row) in q.chunks_mut(queries.row_width()).enumerate() {
            for head in row.chunks_mut(head_dim) {
                rope.rotate(head, first + j)?;
            }
        }

        let width = kv_heads * head_dim;
        let mut k = Vec::with_capacity((cached_rows + chunk) * width);
        for (i, row) in cache.key_rows().enumerate() {
            let start = k.len();
            k.extend_from_slice(row);
            if !cache.keys_rotated {
                for head in k[start..].chunks_mut(head_dim) {
                    rope.rotate(head, i)?;
                }
            }
        }
        for j in 0..chunk {
            let start = k.len();
            k.extend_from_slice(keys.row(j));
            for head in k[start..].chunks_mut(head_dim) {
                rope.rotate(head, first + j)?;
            }
        }

        let mut v = Vec::with_capacity((cached_rows + chunk) * width);
        for row in cache.value_rows() {
            v.extend_from_slice(row);
        }
        v.extend_from_slice(values.as_slice());

        Ok(Self {
            queries: q,
            keys: k,
            values: v,
            cached_rows,
            n_heads,
            kv_heads,
            head_dim,
            scale: 1.0 / (head_dim as f64).sqrt(),
        })
    }

    /// Softmax weights of query `j`, head `h` over rows `0..=cached_rows + j`.
    fn weights(&self, j: usize, h: usize) -> Vec<f64> {
        let d = self.head_dim;
        let g = h / (self.n_heads / self.kv_heads);
        let q = &self.queries[(j * self.n_heads + h) * d..][..d];
        let visible = self.cached_rows + j + 1;
        let mut logits: Vec<f64> = (0..visible)
            .map(|i| {
                let k = &self.keys[(i * self.kv_heads + g) * d..][..d];
                q.iter()
                    .zip(k)
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum::<f64>()
                    * self.scale
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            total += *l;
        }
        logits.iter_mut().for_each(|l| *l /= total);
        logits
    }
}

/// Causal attention of the chunk over `cache ++ chunk`.
///
/// Query head `h` reads kv head `h / (n_heads / n_kv_heads)`.
pub fn attend(inputs: &AttentionInputs<'_>, rope: &Rope) -> Result<KvTensor> {
    let p = Prepared::new(inputs, rope)?;
    let chunk = inputs.queries.seq_len();
    let d = p.head_dim;
    let mut out = vec![0f32; chunk * p.n_heads * d];
    let mut acc = vec![0f64; d];
    for j in 0..chunk {
        for h in 0..p.n_heads {
            let g = h / (p.n_heads / p.kv_heads);
            let w = p.weights(j, h);
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (i, wi) in w.iter().enumerate() {
                let v = &p.values[(i * p.kv_heads + g) * d..][..d];
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += wi * *x as f64;
                }
            }
            let o = &mut out[(j * p.n_heads + h) * d..][..d];
            for (o, a) in o.iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
    }
    KvTensor::from_vec(chunk, p.n_heads, d, out)
}

/// Attention weights of one query row and head, for diagnostics and tests.
pub fn attention_weights(
    inputs: &AttentionInputs<'_>,
    rope: &Rope,
    row: usize,
    head: usize,
) -> Result<Vec<f64>> {
    let p = Prepared::new(inputs, rope)?;
    if row >= inputs.queries.seq_len() || head >= p.n_heads {
        return Err(Error::invalid("query row or head out of range"));
    }
    Ok(p.weights(row, head))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::{CachePolicyConfig, FreqKvCache, KvCache};

    fn tensor(rows: usize, heads: usize, d: usize, seed: u32) -> KvTensor {
        KvTensor::from_fn(rows, heads, d, |r, h, c| {
            let x = (r as u32 * 131 + h as u32 * 31 + c as u32 * 7 + seed * 977) % 1000;
            x as f32 / 500.0 - 1.0
        })
    }

    #[test]
    fn position_zero_is_identity() {
        let rope = Rope::new(8, 10000.0, 16).unwrap();
        let x = tensor(1, 2, 8, 1);
        assert_eq!(rope.apply(&x, &[0]).unwrap(), x);
    }

    #[test]
    fn rotation_preserves_norm() {
        let rope = Rope::new(16, 10000.0, 64).unwrap();
        let x = tensor(5, 1, 16, 3);
        let y = rope.apply(&x, &[1, 7, 20, 40, 63]).unwrap();
        for r in 0..5 {
            let n0: f64 = x.row(r).iter().map(|v| (*v as f64).powi(2)).sum();
            let n1: f64 = y.row(r).iter().map(|v| (*v as f64).powi(2)).sum();
            assert!((n0.sqrt() - n1.sqrt()).abs() <= 1e-6 * n0.sqrt());
        }
    }

    #[test]
    fn out_of_window_position_is_rejected() {
        let rope = Rope::new(4, 10000.0, 8).unwrap();
        let x = tensor(1, 1, 4, 0);
        assert!(matches!(
            rope.apply(&x, &[8]),
            Err(Error::PositionOutOfRange { position: 8, limit: 8 })
        ));
        let unbounded = Rope::unbounded(4, 10000.0, 8).unwrap();
        let far = unbounded.apply(&x, &[100]).unwrap();
        let table = Rope::new(4, 10000.0, 128).unwrap().apply(&x, &[100]).unwrap();
        assert_eq!(far, table);
    }

    #[test]
    fn odd_head_dim_is_rejected() {
        assert!(Rope::new(5, 10000.0, 8).is_err());
    }

    #[test]
    fn single_token_returns_its_value() {
        let cache = FreqKvCache::new(CachePolicyConfig::new(8, 0.5, 1).unwrap(), 1, 4).unwrap();
        let view = cache.view();
        let rope = Rope::new(4, 10000.0, 8).unwrap();
        let q = tensor(1, 2, 4, 1);
        let k = tensor(1, 1, 4, 2);
        let v = tensor(1, 1, 4, 3);
        let out = attend(
            &AttentionInputs {
                queries: &q,
                cache: &view,
                keys: &k,
                values: &v,
            },
            &rope,
        )
        .unwrap();
        assert_eq!(out.head(0, 0), v.row(0));
        assert_eq!(out.head(0, 1), v.row(0));
    }

    #[test]
    fn ungroupable_heads_are_rejected() {
        let cache = FreqKvCache::new(CachePolicyConfig::new(8, 0.5, 1).unwrap(), 2, 4).unwrap();
        let view = cache.view();
        let rope = Rope::new(4, 10000.0, 8).unwrap();
        let q = tensor(1, 3, 4, 1);
        let k = tensor(1, 2, 4, 2);
        let inputs = AttentionInputs {
            queries: &q,
            cache: &view,
            keys: &k,
            values: &k,
        };
        assert!(attend(&inputs, &rope).is_err());
    }

    #[test]
    fn chunk_past_window_is_rejected() {
        let mut cache = FreqKvCache::new(CachePolicyConfig::new(8, 0.5, 1).unwrap(), 1, 4).unwrap();
        let rows = tensor(6, 1, 4, 0);
        cache.append(&rows, &rows).unwrap();
        let view = cache.view();
        let rope = Rope::new(4, 10000.0, 8).unwrap();
        let q = tensor(3, 1, 4, 1);
        let k = tensor(3, 1, 4, 2);
        let inputs = AttentionInputs {
            queries: &q,
            cache: &view,
            keys: &k,
            values: &k,
        };
        assert!(matches!(
            attend(&inputs, &rope),
            Err(Error::PositionOutOfRange { position: 8, .. })
        ));
    }
}
