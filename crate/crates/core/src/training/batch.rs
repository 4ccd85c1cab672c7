use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::synthdata::{Dataset, Sample};
use crate::training::TrainError;

const SOURCE_STREAM: u64 = 0x5352_4345;
const TARGET_STREAM: u64 = 0x5447_5254;

/// Seed for a sub-stream of `seed` keyed by `(stream, index)`.
pub(crate) fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [stream, index] {
        h = (h ^ v).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    h
}

/// Index into `len` items at global step `iter`: a fresh permutation per epoch.
pub(crate) fn epoch_index(len: usize, iter: usize, seed: u64, stream: u64) -> usize {
    let epoch = iter / len;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, epoch as u64)));
    order[iter % len]
}

/// Dataset positions of the source and target images used at `iter`.
pub fn batch_indices(source_len: usize, target_len: usize, iter: usize, seed: u64) -> (usize, usize) {
    (epoch_index(source_len, iter, seed, SOURCE_STREAM), epoch_index(target_len, iter, seed, TARGET_STREAM))
}

/// The two images of step `iter`: one source sample and one target sample
/// with its annotations stripped.
pub fn compose_batch(source: &Dataset, target: &Dataset, iter: usize, seed: u64) -> Result<(Sample, Sample), TrainError> {
    if source.is_empty() || target.is_empty() {
        return Err(TrainError::Config("source and target datasets must be non-empty".into()));
    }
    let (si, ti) = batch_indices(source.len(), target.len(), iter, seed);
    Ok((source.samples[si].clone(), target.samples[ti].stripped()))
}
