//! Dense `[seq_len × n_heads × head_dim]` blocks of key or value states.

use crate::error::{Error, Result};

/// A row-major block of key or value states.
///
/// Row `i` holds `n_heads * head_dim` values; the element for `(row, head, channel)`
/// lives at `(row * n_heads + head) * head_dim + channel`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvTensor {
    seq_len: usize,
    n_heads: usize,
    head_dim: usize,
    data: Vec<f32>,
}

impl KvTensor {
    pub fn zeros(seq_len: usize, n_heads: usize, head_dim: usize) -> Self {
        Self {
            seq_len,
            n_heads,
            head_dim,
            data: vec![0.0; seq_len * n_heads * head_dim],
        }
    }

    pub fn empty(n_heads: usize, head_dim: usize) -> Self {
        Self::zeros(0, n_heads, head_dim)
    }

    pub fn from_vec(seq_len: usize, n_heads: usize, head_dim: usize, data: Vec<f32>) -> Result<Self> {
        let expected = seq_len * n_heads * head_dim;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "kv tensor data",
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            seq_len,
            n_heads,
            head_dim,
            data,
        })
    }

    /// Builds a tensor by evaluating `f(row, head, channel)` at every element.
    pub fn from_fn(
        seq_len: usize,
        n_heads: usize,
        head_dim: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(seq_len * n_heads * head_dim);
        for r in 0..seq_len {
            for h in 0..n_heads {
                for c in 0..head_dim {
                    data.push(f(r, h, c));
                }
            }
        }
        Self {
            seq_len,
            n_heads,
            head_dim,
            data,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn row_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn is_empty(&self) -> bool {
        self.seq_len == 0
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let w = self.row_width();
        &self.data[r * w..(r + 1) * w]
    }

    /// The `head_dim` values of one head in one row.
    pub fn head(&self, r: usize, h: usize) -> &[f32] {
        let start = (r * self.n_heads + h) * self.head_dim;
        &self.data[start..start + self.head_dim]
    }

    pub fn get(&self, r: usize, h: usize, c: usize) -> f32 {
        self.data[(r * self.n_heads + h) * self.head_dim + c]
    }

    pub fn same_layout(&self, other: &KvTensor) -> bool {
        self.n_heads == other.n_heads && self.head_dim == other.head_dim
    }

    pub fn check_layout(&self, n_heads: usize, head_dim: usize) -> Result<()> {
        if self.n_heads != n_heads {
            return Err(Error::DimensionMismatch {
                what: "kv heads",
                expected: n_heads,
                got: self.n_heads,
            });
        }
        if self.head_dim != head_dim {
            return Err(Error::DimensionMismatch {
                what: "head dim",
                expected: head_dim,
                got: self.head_dim,
            });
        }
        Ok(())
    }

    /// Copies rows `start..end` into a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> KvTensor {
        let w = self.row_width();
        KvTensor {
            seq_len: end - start,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            data: self.data[start * w..end * w].to_vec(),
        }
    }

    pub fn extend_rows(&mut self, other: &KvTensor, start: usize, end: usize) {
        debug_assert!(self.same_layout(other));
        let w = self.row_width();
        self.data.extend_from_slice(&other.data[start * w..end * w]);
        self.seq_len += end - start;
    }

    pub fn push_row(&mut self, row: &[f32]) {
        debug_assert_eq!(row.len(), self.row_width());
        self.data.extend_from_slice(row);
        self.seq_len += 1;
    }

    /// Removes the first `n` rows after `keep` leading rows.
    pub fn drain_rows(&mut self, keep: usize, n: usize) {
        let w = self.row_width();
        self.data.drain(keep * w..(keep + n) * w);
        self.seq_len -= n;
    }

    pub fn concat(parts: &[&KvTensor]) -> Result<KvTensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("cannot concatenate zero tensors"))?;
        let mut out = KvTensor::empty(first.n_heads, first.head_dim);
        for p in parts {
            p.check_layout(first.n_heads, first.head_dim)?;
            out.extend_rows(p, 0, p.seq_len);
        }
        Ok(out)
    }

    /// Extracts one `(head, channel)` column along the sequence axis, widened to `f64`.
    pub fn column(&self, h: usize, c: usize) -> Vec<f64> {
        (0..self.seq_len).map(|r| self.get(r, h, c) as f64).collect()
    }

    pub(crate) fn column_into(&self, h: usize, c: usize, out: &mut [f64]) {
        let stride = self.row_width();
        let offset = h * self.head_dim + c;
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.data[r * stride + offset] as f64;
        }
    }

    pub(crate) fn set_column(&mut self, h: usize, c: usize, values: &[f64]) {
        let stride = self.row_width();
        let offset = h * self.head_dim + c;
        for (r, v) in values.iter().enumerate() {
            self.data[r * stride + offset] = *v as f32;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
