//! Deterministic stand-in text embeddings for synthetic descriptions.
//!
//! Words outside the label vocabulary get a pseudo-random unit vector seeded
//! from a hash of the word, and a phrase embeds as the normalized sum of its
//! parts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::data::normalize;

pub fn word_vector(word: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(word.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(v)
}

pub fn compose(parts: &[&[f64]]) -> Vec<f64> {
    let dim = parts.first().map_or(0, |p| p.len());
    let mut sum = vec![0.0; dim];
    for p in parts {
        for (s, x) in sum.iter_mut().zip(p.iter()) {
            *s += x;
        }
    }
    normalize(sum)
}
