//! Deterministic hash embedder: a pure function of (text, dimension).
//!
//! Tokenizes on whitespace, hashes each token with a 64-bit FNV-1a hash
//! seeded by the token index modulo the dimension, accumulates a signed
//! count into the hashed bucket, then L2-normalizes. Same text, same unit
//! vector, on every platform.

use super::{BackendError, EmbedProvider};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET ^ seed.wrapping_mul(FNV_PRIME);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

pub struct HashEmbed {
    dim: usize,
}

impl HashEmbed {
    pub fn new(dim: usize) -> Result<Self, BackendError> {
        if dim == 0 {
            return Err(BackendError::InvalidDescriptor(
                "hash-embed dimension must be >= 1".to_string(),
            ));
        }
        Ok(HashEmbed { dim })
    }

    /// Embeds one text. Exposed for benchmarking the parallel batch path
    /// against a sequential loop.
    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let dim = self.dim;
        let mut v = vec![0.0f32; dim];
        let mut tokens = 0usize;
        for (i, tok) in text.split_whitespace().enumerate() {
            let h = fnv1a64((i % dim) as u64, tok.as_bytes());
            let bucket = (h % dim as u64) as usize;
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[bucket] += sign;
            tokens += 1;
        }
        let mut norm_sq: f64 = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum();
        if tokens == 0 || norm_sq == 0.0 {
            // tokenless input, or signed counts cancelled exactly: fall
            // back to a single deterministic bucket so the output is
            // always unit-norm
            v.iter_mut().for_each(|x| *x = 0.0);
            let h = fnv1a64(0, text.as_bytes());
            v[(h % dim as u64) as usize] = 1.0;
            norm_sq = 1.0;
        }
        let norm = norm_sq.sqrt();
        for x in &mut v {
            *x = (f64::from(*x) / norm) as f32;
        }
        v
    }
}

impl EmbedProvider for HashEmbed {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        #[cfg(feature = "parallel")]
        let vectors = texts.par_iter().map(|t| self.embed_one(t)).collect();
        #[cfg(not(feature = "parallel"))]
        let vectors = texts.iter().map(|t| self.embed_one(t)).collect();
        Ok(vectors)
    }

    fn dimension(&self) -> usize {
        self.dim
    }
}
