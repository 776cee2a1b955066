//! Comparison selectors: uniqueness top-k, attention top-k and a seeded
//! random subset. None of them fuse tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::token_uniqueness;
use crate::sdc::keep_ranked;
use crate::tensor::TokenMatrix;

pub use crate::sdc::{attn_topk, CompressedFrame};

/// Per-frame selector used by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Selector {
    /// Greedy selection with neighbour fusion.
    #[default]
    Sdc,
    UniqueTopk,
    Random { seed: u64 },
}

/// Top-`budget` tokens by mean uniqueness, scored on `key_frame` when given.
pub fn unique_topk(frame: &TokenMatrix, key_frame: Option<&TokenMatrix>, budget: usize) -> Result<CompressedFrame> {
    let scores = match key_frame {
        Some(k) if k.n() != frame.n() => {
            return Err(Error::Shape(format!(
                "key frame has {} tokens, frame has {}",
                k.n(),
                frame.n()
            )))
        }
        Some(k) => k,
        None => frame,
    };
    let ranking = token_uniqueness(scores)?.descending_order();
    keep_ranked(frame, &ranking, budget)
}

/// Uniform `budget`-subset without replacement, reproducible from `seed`.
pub fn random_select(frame: &TokenMatrix, budget: usize, seed: u64) -> Result<CompressedFrame> {
    let n = frame.n();
    if budget == 0 || budget > n {
        return Err(Error::BudgetOutOfRange { k: budget, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ranking = rand::seq::index::sample(&mut rng, n, budget).into_vec();
    keep_ranked(frame, &ranking, budget)
}
