use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fit::TrainConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self { learning_rates: vec![1e-2, 1e-3, 1e-4, 1e-5, 5e-6, 5e-7], batch_sizes: vec![2, 4, 8, 16] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub config: TrainConfig,
    pub best_val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: TrainConfig,
    /// Trials sorted by validation loss, ties kept in trial order.
    pub leaderboard: Vec<Trial>,
}

/// Evaluates `n_trials` distinct (learning rate, batch size) pairs drawn
/// without replacement from the grid; `evaluate` returns the best
/// validation loss of one training run.
pub fn random_grid_search(
    space: &SearchSpace,
    base: &TrainConfig,
    n_trials: usize,
    seed: u64,
    mut evaluate: impl FnMut(&TrainConfig) -> Result<f64>,
) -> Result<SearchResult> {
    let mut grid: Vec<(f64, usize)> = space
        .learning_rates
        .iter()
        .flat_map(|&lr| space.batch_sizes.iter().map(move |&bs| (lr, bs)))
        .collect();
    if grid.is_empty() || n_trials == 0 {
        return Err(Error::Config("search needs a non-empty grid and at least one trial".into()));
    }
    if n_trials > grid.len() {
        return Err(Error::Config(format!("{n_trials} trials requested from a grid of {}", grid.len())));
    }
    grid.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    grid.truncate(n_trials);
    let mut leaderboard = Vec::with_capacity(grid.len());
    for (lr, bs) in grid {
        let config = TrainConfig { learning_rate: lr, batch_size: bs, ..base.clone() };
        let best_val_loss = evaluate(&config)?;
        leaderboard.push(Trial { config, best_val_loss });
    }
    leaderboard.sort_by(|a, b| a.best_val_loss.total_cmp(&b.best_val_loss));
    Ok(SearchResult { best: leaderboard[0].config.clone(), leaderboard })
}
