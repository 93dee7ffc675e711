//! Model dimension configuration shared by both stages.

use serde::{Deserialize, Serialize};

/// Widths of every learned map. Both models read from one config so their
/// parameter shapes stay mutually consistent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Vocabulary size including reserved ids.
    pub vocab: usize,
    /// Word embedding width.
    pub d_word: usize,
    /// LSTM hidden units per direction; encoder outputs are twice this.
    pub d_hidden: usize,
    /// Candidate/correlation representation width.
    pub d_cand: usize,
    /// Common-word indicator embedding width.
    pub d_common: usize,
    /// Distance-bucket embedding width.
    pub d_dist: usize,
    /// Distances are clipped to `[-dist_clip, dist_clip]` before bucketing.
    pub dist_clip: i64,
}

impl ModelConfig {
    pub fn new(vocab: usize) -> Self {
        ModelConfig {
            vocab,
            d_word: 64,
            d_hidden: 100,
            d_cand: 100,
            d_common: 4,
            d_dist: 50,
            dist_clip: 20,
        }
    }

    /// Number of distance buckets: one per integer in the clipped range.
    pub fn dist_buckets(&self) -> usize {
        (2 * self.dist_clip + 1) as usize
    }
}
