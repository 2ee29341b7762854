//! Shared fixtures for the benchmarks.

use crowdtsc::corpus::{TokenId, Vocabulary};
use crowdtsc::embeddings::{init_random, EmbeddingTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn table(vocab_size: usize, dim: usize) -> EmbeddingTable {
    let vocab = Vocabulary::from_entries((0..vocab_size).map(|i| (format!("t{i}"), 1))).expect("distinct tokens");
    init_random(&vocab, dim, 0).expect("valid dimension")
}

/// `n` token ids drawn from the non-special rows of a `vocab_size` table.
pub fn document(n: usize, vocab_size: usize, seed: u64) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(2..vocab_size as TokenId + 2)).collect()
}

/// Points from `k` Gaussian-ish blobs in `dim` dimensions.
pub fn blobs(n: usize, k: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
    (0..n)
        .map(|i| centres[i % k].iter().map(|c| c + rng.random_range(-1.0..1.0)).collect())
        .collect()
}
