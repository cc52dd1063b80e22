use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Conversation indices of each split, each sorted ascending. Conversations
/// never straddle splits.
pub fn split_indices(num_conversations: usize, ratios: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    if ratios.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
        return Err(Error::Argument(format!("split ratios must be positive, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("split ratios sum to {total}, not 1")));
    }
    let n = num_conversations;
    let n_train = (ratios[0] * n as f64).round() as usize;
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n.saturating_sub(n_train));
    let n_test = n - n_train - n_val;
    for (name, size) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        if size == 0 {
            return Err(Error::EmptySplit { name });
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let sorted = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx
    };
    Ok([
        sorted(&order[..n_train]),
        sorted(&order[n_train..n_train + n_val]),
        sorted(&order[n_train + n_val..]),
    ])
}

pub fn split(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<Split> {
    let [train, val, test] = split_indices(dataset.conversations.len(), ratios, seed)?;
    let pick = |idx: &[usize]| dataset.with_conversations(idx.iter().map(|&i| dataset.conversations[i].clone()).collect());
    Ok(Split {
        train: pick(&train),
        val: pick(&val),
        test: pick(&test),
    })
}
