//! Shared fixtures for the criterion benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spanfuse_core::{Example, FeatureFlags, ModelConfig, TrainState, Vocab};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A mid-sized vocabulary plus both models at the given widths.
pub fn fixture(d_hidden: usize) -> (Vocab, TrainState) {
    let tokens: Vec<String> = (0..200).map(|i| format!("t{i}")).collect();
    let vocab = Vocab::build(std::iter::once(tokens.as_slice()), 1);
    let cfg = ModelConfig {
        vocab: vocab.len(),
        d_word: 32,
        d_hidden,
        d_cand: 32,
        d_common: 4,
        d_dist: 16,
        dist_clip: 20,
    };
    let state = TrainState::new(cfg, FeatureFlags::default(), 7);
    (vocab, state)
}

/// One question with `n` passages of `len` tokens; the answer sits in two of
/// them.
pub fn example(n: usize, len: usize) -> Example {
    let passage = |salt: usize| -> Vec<String> {
        (0..len)
            .map(|i| format!("t{}", (i * 7 + salt * 13) % 180))
            .collect()
    };
    let mut passages: Vec<Vec<String>> = (0..n).map(passage).collect();
    passages[0][2] = "t190".into();
    passages[n - 1][len / 2] = "t190".into();
    Example {
        id: "bench".into(),
        question: vec!["t1".into(), "t2".into(), "t3".into()],
        answers: vec!["t190".into()],
        passages,
    }
}
