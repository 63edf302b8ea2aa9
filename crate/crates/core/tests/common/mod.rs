#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn alpha(t: usize, n: usize) -> f64 {
    if t == 0 {
        (1.0 / n as f64).sqrt()
    } else {
        (2.0 / n as f64).sqrt()
    }
}

/// Definitional O(N^2) DCT-II sum.
pub fn dct_oracle(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|t| {
            alpha(t, n)
                * x.iter()
                    .enumerate()
                    .map(|(i, v)| v * (PI * t as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
                    .sum::<f64>()
        })
        .collect()
}

/// Definitional O(N^2) inverse.
pub fn idct_oracle(z: &[f64]) -> Vec<f64> {
    let n = z.len();
    (0..n)
        .map(|i| {
            z.iter()
                .enumerate()
                .map(|(t, v)| alpha(t, n) * v * (PI * t as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
                .sum()
        })
        .collect()
}

/// Low-pass compression built only from the oracle sums.
pub fn lowpass_oracle(x: &[f64], retain: usize) -> Vec<f64> {
    let z = dct_oracle(x);
    let scale = (retain as f64 / x.len() as f64).sqrt();
    idct_oracle(&z[..retain]).into_iter().map(|v| v * scale).collect()
}

pub fn uniform(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn white_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Stationary AR(1): x[t] = phi * x[t-1] + sqrt(1 - phi^2) * e[t].
pub fn ar1(n: usize, phi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = Vec::with_capacity(n);
    let mut prev: f64 = rng.sample(StandardNormal);
    let innov = (1.0 - phi * phi).sqrt();
    for _ in 0..n {
        x.push(prev);
        let e: f64 = rng.sample(StandardNormal);
        prev = phi * prev + innov * e;
    }
    x
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b).max(f64::MIN_POSITIVE)
}

pub fn rel_err_f32(a: &[f32], b: &[f32]) -> f64 {
    let a: Vec<f64> = a.iter().map(|v| *v as f64).collect();
    let b: Vec<f64> = b.iter().map(|v| *v as f64).collect();
    rel_err(&a, &b)
}

/// Resample an N-length column to L points by linear interpolation, so reconstructions
/// of different lengths can be compared against the original.
pub fn resample(x: &[f64], len: usize) -> Vec<f64> {
    let n = x.len();
    (0..len)
        .map(|i| {
            // Cell centres of the L-grid mapped into the N-grid.
            let pos = (i as f64 + 0.5) * n as f64 / len as f64 - 0.5;
            let pos = pos.clamp(0.0, (n - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let w = pos - lo as f64;
            x[lo] * (1.0 - w) + x[hi] * w
        })
        .collect()
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}
