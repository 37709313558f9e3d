//! Learning-rate decay and early stopping.

/// Polynomial decay: `base · (1 − epoch/total)^power`. Defined for
/// `epoch ≤ total`; non-increasing in `epoch`, reaching exactly 0 at
/// `epoch == total`.
pub fn lr_schedule(base: f64, epoch: usize, total: usize, power: f64) -> f64 {
    assert!(epoch <= total, "epoch {epoch} out of schedule range {total}");
    base * (1.0 - epoch as f64 / total as f64).powf(power)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Wait,
    Stop,
}

/// Tracks the best validation score (higher is better) and signals a stop
/// after `patience` consecutive epochs without improvement.
#[derive(Debug)]
pub struct EarlyStopper {
    patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    since: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            since: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> StopDecision {
        if value > self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.since = 0;
            StopDecision::Improved
        } else {
            self.since += 1;
            if self.since >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Wait
            }
        }
    }
}
