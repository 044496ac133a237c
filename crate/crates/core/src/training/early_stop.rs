/// Stops after `patience` consecutive epochs without a strict decrease of
/// the validation loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
    epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: None, stale: 0, epochs: 0 }
    }

    pub fn observe(&mut self, val_loss: f64) -> Verdict {
        self.epochs += 1;
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(self.epochs);
            self.stale = 0;
            return Verdict::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }

    /// One-based epoch of the best loss so far.
    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

/// Replays a validation-loss series; returns the number of epochs run and
/// the one-based best epoch.
pub fn simulate_early_stopping(losses: &[f64], patience: usize) -> (usize, Option<usize>) {
    let mut es = EarlyStopping::new(patience);
    for (i, &l) in losses.iter().enumerate() {
        if es.observe(l) == Verdict::Stop {
            return (i + 1, es.best_epoch());
        }
    }
    (losses.len(), es.best_epoch())
}
