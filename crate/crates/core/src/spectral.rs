//! Orthonormal DCT-II / DCT-III along the sequence axis and the frequency-domain
//! compression operators built on top of them.
//!
//! The forward transform is
//!
//! ```text
//! z[t] = a(t) * sum_n x[n] * cos(pi * t * (2n + 1) / 2N),   a(0) = sqrt(1/N), a(t>0) = sqrt(2/N)
//! ```
//!
//! and the inverse is `x[n] = sum_t a(t) * z[t] * cos(pi * t * (2n + 1) / 2N)`. Both run in
//! `O(N log N)` through a single `N`-point complex FFT using Makhoul's even/odd reordering,
//! so any length works, not just powers of two. All arithmetic is `f64`; tensors are `f32`
//! and are widened per column.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::KvTensor;

/// Precomputed FFT plans and twiddles for one transform length.
pub struct DctPlan {
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    // exp(-i*pi*k / 2N)
    twiddles: Vec<Complex64>,
}

impl std::fmt::Debug for DctPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DctPlan").field("len", &self.len).finish()
    }
}

impl DctPlan {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::invalid("DCT length must be at least 1"));
        }
        let mut planner = FftPlanner::<f64>::new();
        let twiddles = (0..len)
            .map(|k| Complex64::from_polar(1.0, -PI * k as f64 / (2.0 * len as f64)))
            .collect();
        Ok(Self {
            len,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
            twiddles,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn alpha(&self, t: usize) -> f64 {
        let n = self.len as f64;
        if t == 0 {
            (1.0 / n).sqrt()
        } else {
            (2.0 / n).sqrt()
        }
    }

    /// Orthonormal DCT-II of `input` into `output`.
    pub fn forward(&self, input: &[f64], output: &mut [f64]) {
        let n = self.len;
        assert_eq!(input.len(), n);
        assert_eq!(output.len(), n);

        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..n.div_ceil(2) {
            buf[i].re = input[2 * i];
        }
        for i in 0..n / 2 {
            buf[n - 1 - i].re = input[2 * i + 1];
        }
        self.forward.process(&mut buf);

        for (t, out) in output.iter_mut().enumerate() {
            *out = self.alpha(t) * (buf[t] * self.twiddles[t]).re;
        }
    }

    /// Orthonormal inverse (DCT-III) of `input` into `output`.
    pub fn inverse(&self, input: &[f64], output: &mut [f64]) {
        let n = self.len;
        assert_eq!(input.len(), n);
        assert_eq!(output.len(), n);

        // Undo the normalization to get the plain cosine sums y[k], then rebuild the FFT
        // of the reordered sequence: V[k] = exp(i*pi*k/2N) * (y[k] - i*y[N-k]).
        let y = |k: usize| input[k] / self.alpha(k);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        buf[0] = Complex64::new(y(0), 0.0);
        for (k, slot) in buf.iter_mut().enumerate().skip(1) {
            *slot = self.twiddles[k].conj() * Complex64::new(y(k), -y(n - k));
        }
        self.inverse.process(&mut buf);

        let scale = 1.0 / n as f64;
        for i in 0..n.div_ceil(2) {
            output[2 * i] = buf[i].re * scale;
        }
        for i in 0..n / 2 {
            output[2 * i + 1] = buf[n - 1 - i].re * scale;
        }
    }
}

/// Orthonormal DCT-II of a signal.
pub fn dct(signal: &[f64]) -> Result<Vec<f64>> {
    let plan = DctPlan::new(signal.len())?;
    let mut out = vec![0.0; signal.len()];
    plan.forward(signal, &mut out);
    Ok(out)
}

/// Orthonormal inverse DCT of a spectrum.
pub fn idct(spectrum: &[f64]) -> Result<Vec<f64>> {
    let plan = DctPlan::new(spectrum.len())?;
    let mut out = vec![0.0; spectrum.len()];
    plan.inverse(spectrum, &mut out);
    Ok(out)
}

/// Which end of the spectrum survives compression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    /// Keep coefficients `0..L`.
    Low,
    /// Keep coefficients `N-L..N`.
    High,
}

/// How a block of `N` rows is reduced to `L` rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Compressor {
    pub band: Band,
    /// Multiply the reconstruction by `sqrt(L/N)` so amplitudes survive the change
    /// of transform length.
    pub rescale: bool,
}

impl Compressor {
    pub const LOW_PASS: Compressor = Compressor {
        band: Band::Low,
        rescale: true,
    };
    pub const HIGH_PASS: Compressor = Compressor {
        band: Band::High,
        rescale: true,
    };
    pub const LOW_PASS_NO_RESCALE: Compressor = Compressor {
        band: Band::Low,
        rescale: false,
    };

    /// Compresses every `(head, channel)` column of `block` from `N = block.seq_len()`
    /// rows down to `retain` rows.
    pub fn apply(&self, block: &KvTensor, retain: usize) -> Result<KvTensor> {
        let n = block.seq_len();
        if retain < 1 || retain > n {
            return Err(Error::invalid(format!(
                "retain length {retain} must lie in 1..={n}"
            )));
        }
        let long = DctPlan::new(n)?;
        let short = DctPlan::new(retain)?;
        let scale = if self.rescale {
            (retain as f64 / n as f64).sqrt()
        } else {
            1.0
        };
        let kept = match self.band {
            Band::Low => 0..retain,
            Band::High => n - retain..n,
        };

        let mut out = KvTensor::zeros(retain, block.n_heads(), block.head_dim());
        let mut column = vec![0.0; n];
        let mut coeffs = vec![0.0; n];
        let mut recon = vec![0.0; retain];
        for h in 0..block.n_heads() {
            for c in 0..block.head_dim() {
                block.column_into(h, c, &mut column);
                long.forward(&column, &mut coeffs);
                short.inverse(&coeffs[kept.clone()], &mut recon);
                recon.iter_mut().for_each(|x| *x *= scale);
                out.set_column(h, c, &recon);
            }
        }
        Ok(out)
    }
}

/// Low-pass compression with amplitude rescaling: `sqrt(L/N) * IDCT_L(DCT_N(x)[0..L])`.
pub fn compress_lowpass(block: &KvTensor, retain: usize) -> Result<KvTensor> {
    Compressor::LOW_PASS.apply(block, retain)
}

/// Keeps the top `retain` frequencies instead of the bottom ones.
pub fn compress_highpass(block: &KvTensor, retain: usize) -> Result<KvTensor> {
    Compressor::HIGH_PASS.apply(block, retain)
}

/// Whether a power spectrum reports mean `|z_t|` or mean `z_t^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    #[default]
    Amplitude,
    Power,
}

/// Counts of what was averaged into a spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Averaging {
    pub samples: usize,
    pub heads: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSpectrum {
    pub magnitudes: Vec<f64>,
    pub convention: Convention,
    pub averaging: Averaging,
    /// Fraction of total power (sum of squared coefficients) in the lowest half of the bins.
    pub low_band_fraction: f64,
}

/// Running sums of per-bin amplitude and power over many equal-length columns.
#[derive(Debug)]
pub struct SpectrumAccumulator {
    plan: DctPlan,
    amplitude: Vec<f64>,
    power: Vec<f64>,
    columns: usize,
    samples: usize,
    heads: usize,
    channels: usize,
    scratch: Vec<f64>,
    coeffs: Vec<f64>,
}

impl SpectrumAccumulator {
    pub fn new(len: usize) -> Result<Self> {
        Ok(Self {
            plan: DctPlan::new(len)?,
            amplitude: vec![0.0; len],
            power: vec![0.0; len],
            columns: 0,
            samples: 0,
            heads: 0,
            channels: 0,
            scratch: vec![0.0; len],
            coeffs: vec![0.0; len],
        })
    }

    pub fn len(&self) -> usize {
        self.plan.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns == 0
    }

    pub fn add_column(&mut self, column: &[f64]) {
        self.plan.forward(column, &mut self.coeffs);
        for ((a, p), z) in self.amplitude.iter_mut().zip(&mut self.power).zip(&self.coeffs) {
            *a += z.abs();
            *p += z * z;
        }
        self.columns += 1;
    }

    /// Adds every column of `block`, truncated to the accumulator length.
    pub fn add_block(&mut self, block: &KvTensor) -> Result<()> {
        self.add_heads(block, 0..block.n_heads())
    }

    /// Adds the columns of heads `heads` of `block`, truncated to the accumulator length.
    pub fn add_heads(&mut self, block: &KvTensor, heads: std::ops::Range<usize>) -> Result<()> {
        let n = self.len();
        if block.seq_len() < n {
            return Err(Error::invalid(format!(
                "block has {} rows, spectrum needs {n}",
                block.seq_len()
            )));
        }
        if heads.end > block.n_heads() {
            return Err(Error::invalid("head range exceeds the block"));
        }
        let mut column = std::mem::take(&mut self.scratch);
        let mut full = vec![0.0; block.seq_len()];
        for h in heads.clone() {
            for c in 0..block.head_dim() {
                block.column_into(h, c, &mut full);
                column.copy_from_slice(&full[..n]);
                self.add_column(&column);
            }
        }
        self.scratch = column;
        self.samples += 1;
        self.heads = heads.len();
        self.channels = block.head_dim();
        Ok(())
    }

    pub fn finish(&self, convention: Convention) -> Result<PowerSpectrum> {
        if self.columns == 0 {
            return Err(Error::invalid("no columns were accumulated"));
        }
        let count = self.columns as f64;
        let magnitudes = match convention {
            Convention::Amplitude => &self.amplitude,
            Convention::Power => &self.power,
        }
        .iter()
        .map(|v| v / count)
        .collect();
        Ok(PowerSpectrum {
            magnitudes,
            convention,
            averaging: Averaging {
                samples: self.samples.max(1),
                heads: self.heads,
                channels: self.channels,
            },
            low_band_fraction: low_band_fraction(&self.power, 0.5),
        })
    }
}

/// Fraction of `power` (already squared) that sits in the lowest `band` share of bins.
pub fn low_band_fraction(power: &[f64], band: f64) -> f64 {
    let total: f64 = power.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let cut = band_cut(power.len(), band);
    (power[..cut].iter().sum::<f64>() / total).clamp(0.0, 1.0)
}

/// Number of bins in the low band: `floor(len * band)`, at least one.
pub fn band_cut(len: usize, band: f64) -> usize {
    ((len as f64 * band).floor() as usize).clamp(1, len)
}

/// Mean spectrum over all heads and channels of one block.
pub fn power_spectrum(block: &KvTensor, convention: Convention) -> Result<PowerSpectrum> {
    if block.is_empty() || block.row_width() == 0 {
        return Err(Error::invalid("power spectrum of an empty block"));
    }
    let mut acc = SpectrumAccumulator::new(block.seq_len())?;
    acc.add_block(block)?;
    acc.finish(convention)
}
