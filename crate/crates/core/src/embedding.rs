//! Word vectors for node labels.
//!
//! Words found in a loaded table use their stored vector. Any other word gets
//! a unit-norm Gaussian vector drawn from a ChaCha8 stream seeded with the
//! 64-bit FNV-1a hash of the word xor the table seed, so the same word maps to
//! the same vector on every run and every machine.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    seed: u64,
    words: HashMap<String, Vec<f32>>,
}

impl EmbeddingTable {
    /// An empty table: every word falls back to its hash-seeded vector.
    pub fn hashed(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            words: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert(&mut self, word: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::InvalidAnnotation(format!(
                "word vector of width {} in a table of width {}",
                vector.len(),
                self.dim
            )));
        }
        self.words.insert(word.into(), vector);
        Ok(())
    }

    /// Loads a GloVe-style text file: one word per line followed by `dim`
    /// whitespace-separated values.
    pub fn load_text(path: &Path, dim: usize, seed: u64) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut table = Self::hashed(dim, seed);
        for (n, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values: std::result::Result<Vec<f32>, _> = parts.map(str::parse).collect();
            let values = values.map_err(|e| {
                Error::InvalidAnnotation(format!("{}:{}: {e}", path.display(), n + 1))
            })?;
            table.insert(word, values)?;
        }
        Ok(table)
    }

    pub fn word(&self, word: &str) -> Vec<f32> {
        if let Some(v) = self.words.get(word) {
            return v.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word.as_bytes()) ^ self.seed);
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        v.iter_mut().for_each(|x| *x /= norm);
        v.into_iter().map(|x| x as f32).collect()
    }

    /// Sum of the vectors of the whitespace-separated words of `label`.
    pub fn embed_label(&self, label: &str) -> Result<Vec<f32>> {
        let mut words = label.split_whitespace().peekable();
        if words.peek().is_none() {
            return Err(Error::EmptyLabel);
        }
        let mut out = vec![0.0f32; self.dim];
        for w in words {
            for (o, x) in out.iter_mut().zip(self.word(w)) {
                *o += x;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_word_uses_table() {
        let mut t = EmbeddingTable::hashed(2, 0);
        t.insert("ball", vec![0.5, -1.0]).unwrap();
        assert_eq!(t.embed_label("ball").unwrap(), vec![0.5, -1.0]);
    }

    #[test]
    fn multi_word_is_sum() {
        let mut t = EmbeddingTable::hashed(3, 0);
        t.insert("exercise", vec![1.0, 2.0, 3.0]).unwrap();
        t.insert("ball", vec![0.5, 0.0, -1.0]).unwrap();
        assert_eq!(t.embed_label(" exercise  ball ").unwrap(), vec![1.5, 2.0, 2.0]);
    }

    #[test]
    fn unknown_words_are_stable_unit_vectors() {
        let a = EmbeddingTable::hashed(16, 7).word("zebra");
        let b = EmbeddingTable::hashed(16, 7).word("zebra");
        assert_eq!(a, b);
        let norm: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        assert_ne!(a, EmbeddingTable::hashed(16, 7).word("zebras"));
    }

    #[test]
    fn empty_label_rejected() {
        let t = EmbeddingTable::hashed(4, 0);
        assert!(matches!(t.embed_label("   "), Err(Error::EmptyLabel)));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn loads_text_vectors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vec.txt");
        fs::write(&p, "cup 1 0\nrope 0.5 0.25\n").unwrap();
        let t = EmbeddingTable::load_text(&p, 2, 0).unwrap();
        assert_eq!(t.embed_label("cup rope").unwrap(), vec![1.5, 0.25]);
        fs::write(&p, "cup 1\n").unwrap();
        assert!(EmbeddingTable::load_text(&p, 2, 0).is_err());
    }
}
