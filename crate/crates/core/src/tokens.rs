//! Token-id streams on disk and the bundled synthetic corpus.
//!
//! Files ending in `.bin` hold raw little-endian `u32` ids. Anything else is text:
//! whitespace-separated decimal ids, one stream per non-empty line.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

pub fn parse_text(text: &str) -> Result<Vec<Vec<u32>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            line.split_whitespace()
                .map(|w| {
                    w.parse::<u32>()
                        .map_err(|_| Error::invalid(format!("`{w}` is not a token id")))
                })
                .collect()
        })
        .collect()
}

/// Reads every stream in a file. Binary files hold a single stream.
pub fn read_streams(path: impl AsRef<Path>) -> Result<Vec<Vec<u32>>> {
    let path = path.as_ref();
    if is_binary(path) {
        let raw = fs::read(path)?;
        if raw.len() % 4 != 0 {
            return Err(Error::Truncated(format!(
                "{} is not a whole number of u32 ids",
                path.display()
            )));
        }
        Ok(vec![raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()])
    } else {
        parse_text(&fs::read_to_string(path)?)
    }
}

/// Reads a file and concatenates its streams.
pub fn read_tokens(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    Ok(read_streams(path)?.concat())
}

pub fn format_text(tokens: &[u32]) -> String {
    let mut s = tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
    s.push('\n');
    s
}

pub fn write_tokens(path: impl AsRef<Path>, tokens: &[u32]) -> Result<()> {
    let path = path.as_ref();
    if is_binary(path) {
        let bytes: Vec<u8> = tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
        fs::write(path, bytes)?;
    } else {
        fs::write(path, format_text(tokens))?;
    }
    Ok(())
}

/// Uniformly random token ids.
pub fn random_stream(len: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Slowly drifting streams: each token stays close to its predecessor, with occasional
/// jumps, so consecutive embeddings repeat often.
pub fn synthetic_corpus(streams: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..streams)
        .map(|_| {
            let mut t = rng.random_range(0..vocab as u32);
            (0..len)
                .map(|_| {
                    if rng.random_bool(0.1) {
                        t = rng.random_range(0..vocab as u32);
                    } else if rng.random_bool(0.3) {
                        t = (t + 1) % vocab as u32;
                    }
                    t
                })
                .collect()
        })
        .collect()
}
