//! Losses, optimiser, early stopping, the epoch loop and hyperparameter
//! search.

mod early_stop;
mod fit;
pub mod loss;
mod optim;
mod search;

pub use early_stop::{simulate_early_stopping, EarlyStopping, Verdict};
pub use fit::{collate, train, Sample, Segmenter, TrainConfig, TrainOutcome, TrainingHistory};
pub use loss::{bce_loss, combined_loss, dice_loss, LossKind, DEFAULT_DICE_SMOOTH};
pub use optim::Adam;
pub use search::{random_grid_search, SearchResult, SearchSpace, Trial};
