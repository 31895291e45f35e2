//! Seed derivation and portable sampling primitives.
//!
//! Every random decision in the simulator draws from a ChaCha stream whose
//! seed is derived from the master seed plus a stream tag and context indices.
//! Separate concerns (partitioning, client sampling, dropout masks, candidate
//! draws, ...) get separate tags, so changing one experiment knob never
//! perturbs the draws of another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream tags, one per independent source of randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Synthetic data generation.
    DataGen,
    /// Dirichlet partitioning across clients.
    Partition,
    /// Labeled/unlabeled split within a client.
    LabelSplit,
    /// Shared initial model weights.
    Init,
    /// Per-round client sampling.
    Sampling,
    /// Dropout masks during training.
    TrainDropout,
    /// Dropout masks during MC-dropout evaluation.
    McEval,
    /// Random candidate draws in the helper search phase.
    Candidates,
    /// Helper-list fill at first participation.
    Fill,
    /// Minibatch shuffling.
    Shuffle,
    /// Random-helper control draws.
    RandomControl,
    /// Per-repeat seed offsets.
    Repeat,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::DataGen => 1,
            Stream::Partition => 2,
            Stream::LabelSplit => 3,
            Stream::Init => 4,
            Stream::Sampling => 5,
            Stream::TrainDropout => 6,
            Stream::McEval => 7,
            Stream::Candidates => 8,
            Stream::Fill => 9,
            Stream::Shuffle => 10,
            Stream::RandomControl => 11,
            Stream::Repeat => 12,
        }
    }
}

/// SplitMix64 finalizer; mixes one word into the running seed state.
fn mix(state: u64, word: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(word);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a list of context words.
pub fn derive_seed(base: u64, context: &[u64]) -> u64 {
    let mut state = mix(base, 0x5b8f_13a4_c0de_f00d);
    for &word in context {
        state = mix(state, word);
    }
    state
}

/// Derives the seed of a named stream within an experiment.
pub fn stream_seed(master: u64, stream: Stream, context: &[u64]) -> u64 {
    let mut state = mix(master, stream.tag());
    for &word in context {
        state = mix(state, word);
    }
    state
}

/// Constructs the ChaCha generator for a derived seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal draw via Box-Muller on the given stream.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // 1 - u keeps the argument of ln strictly positive.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Gamma(shape, 1) draw via the Marsaglia-Tsang squeeze method.
pub fn gamma(rng: &mut ChaCha8Rng, shape: f64) -> f64 {
    assert!(shape > 0.0, "gamma shape must be positive");
    if shape < 1.0 {
        // Boost: Gamma(a) = Gamma(a + 1) * U^(1/a).
        let boost = gamma(rng, shape + 1.0);
        let u: f64 = 1.0 - rng.gen::<f64>();
        return boost * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = standard_normal(rng);
        let v = (1.0 + c * x).powi(3);
        if v <= 0.0 {
            continue;
        }
        let u: f64 = 1.0 - rng.gen::<f64>();
        if u < 1.0 - 0.0331 * x.powi(4) {
            return d * v;
        }
        if u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// Draws a point on the (dim-1)-simplex from Dirichlet(alpha, ..., alpha).
pub fn dirichlet(rng: &mut ChaCha8Rng, alpha: f64, dim: usize) -> Vec<f64> {
    assert!(dim >= 1);
    let draws: Vec<f64> = (0..dim).map(|_| gamma(rng, alpha)).collect();
    let total: f64 = draws.iter().sum();
    if total <= 0.0 {
        // All-underflow corner at extremely small alpha: fall back to a
        // degenerate draw on a uniformly chosen coordinate.
        let winner = rng.gen_range(0..dim);
        let mut p = vec![0.0; dim];
        p[winner] = 1.0;
        return p;
    }
    draws.iter().map(|g| g / total).collect()
}

/// Fisher-Yates shuffle driven by the given stream.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Uniform draw of `count` distinct items from `pool`, preserving no order.
pub fn sample_without_replacement(
    rng: &mut ChaCha8Rng,
    pool: &[usize],
    count: usize,
) -> Vec<usize> {
    let mut scratch: Vec<usize> = pool.to_vec();
    let take = count.min(scratch.len());
    for i in 0..take {
        let j = rng.gen_range(i..scratch.len());
        scratch.swap(i, j);
    }
    scratch.truncate(take);
    scratch
}
