pub const DEFAULT_PATIENCE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    NoImprovement,
    Stop,
}

/// Halts once `patience` consecutive epochs fail to beat the best
/// validation loss strictly.
#[derive(Clone, Debug)]
pub struct EarlyStopState {
    pub best_loss: f64,
    pub best_epoch: usize,
    pub since_improvement: usize,
    pub patience: usize,
    epochs: usize,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        EarlyStopState {
            best_loss: f64::INFINITY,
            best_epoch: 0,
            since_improvement: 0,
            patience: patience.max(1),
            epochs: 0,
        }
    }

    /// Records one epoch's validation loss (epochs count from 1).
    pub fn observe(&mut self, val_loss: f64) -> StopDecision {
        self.epochs += 1;
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = self.epochs;
            self.since_improvement = 0;
            return StopDecision::Improved;
        }
        self.since_improvement += 1;
        if self.since_improvement >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::NoImprovement
        }
    }
}

impl Default for EarlyStopState {
    fn default() -> Self {
        Self::new(DEFAULT_PATIENCE)
    }
}
