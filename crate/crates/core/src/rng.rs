//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by
//! `(seed, index, purpose, sub)`. The key is the full 256-bit ChaCha key, so
//! distinct tuples never share a stream and adding a task or a new purpose
//! leaves all existing draws untouched.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. The discriminant is part of the stream key and
/// must never be renumbered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    GeneratorParams = 1,
    SourceEmbedding = 2,
    TaskEffects = 3,
    TaskFeatures = 4,
    OutcomeNoise = 5,
    SpuriousNoise = 6,
    DataSplit = 7,
    Corruption = 8,
    EmbeddingNoise = 9,
    MetaBatch = 10,
    InnerNoise = 11,
    Validation = 12,
    Prediction = 13,
    BaselineInit = 14,
    Baseline = 15,
    ExpertAnswer = 16,
    BaldSamples = 17,
    SviNoise = 18,
    RandomQuery = 19,
    Bootstrap = 20,
    Theory = 21,
    Adaptation = 22,
}

pub fn stream(seed: u64, index: u64, purpose: Purpose) -> StreamRng {
    stream_sub(seed, index, purpose, 0)
}

pub fn stream_sub(seed: u64, index: u64, purpose: Purpose, sub: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16..24].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[24..].copy_from_slice(&sub.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[inline]
pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| std_normal(rng)).collect()
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
