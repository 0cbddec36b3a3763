//! Fixtures for the criterion benchmarks: desk-scale model configs with a
//! pinned vocabulary and synthetic EOS-terminated id corpora.

use ctnmt_core::model::{Mode, ModelConfig};
use ctnmt_core::tokenize::EOS;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const BENCH_VOCAB: usize = 64;

/// Desk-scale config with both vocabularies pinned to [`BENCH_VOCAB`].
pub fn bench_config(mode: Mode) -> ModelConfig {
    ModelConfig::desk(mode, BENCH_VOCAB, BENCH_VOCAB)
}

/// `n` id rows of length `len` (EOS included) drawn uniformly from the
/// non-reserved range, each paired with itself. Timing does not depend on
/// token content, only on shapes.
pub fn synthetic_pairs(n: usize, len: usize, seed: u64) -> Vec<(Vec<u32>, Vec<u32>)> {
    assert!(len >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut row: Vec<u32> = (1..len)
                .map(|_| rng.gen_range(4..BENCH_VOCAB as u32))
                .collect();
            row.push(EOS);
            (row.clone(), row)
        })
        .collect()
}
