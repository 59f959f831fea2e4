use super::TrainError;

/// Reduce-on-plateau learning-rate schedule monitoring a loss to minimize.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub patience: usize,
    pub factor: f64,
    pub best: f64,
    pub wait: usize,
    pub min_lr: f64,
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        PlateauSchedule::new(10, 0.2, 0.0)
    }
}

impl PlateauSchedule {
    pub fn new(patience: usize, factor: f64, min_lr: f64) -> Self {
        PlateauSchedule {
            patience,
            factor,
            best: f64::INFINITY,
            wait: 0,
            min_lr,
        }
    }

    /// Feeds one epoch's loss and returns the learning rate to use next.
    ///
    /// A strictly lower loss resets the wait counter. Otherwise the counter
    /// grows, and once it exceeds `patience` the rate is multiplied by
    /// `factor` (floored at `min_lr`) and the counter resets.
    pub fn update(&mut self, epoch_loss: f64, lr: f64) -> Result<f64, TrainError> {
        if !epoch_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss(epoch_loss));
        }
        if epoch_loss < self.best {
            self.best = epoch_loss;
            self.wait = 0;
            return Ok(lr);
        }
        self.wait += 1;
        if self.wait > self.patience {
            self.wait = 0;
            return Ok((lr * self.factor).max(self.min_lr).min(lr));
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_loss_reduces_after_patience_plus_one_stalls() {
        let mut s = PlateauSchedule::default();
        let mut lr = s.update(1.0, 2e-4).unwrap();
        for _ in 0..10 {
            lr = s.update(1.0, lr).unwrap();
            assert_eq!(lr, 2e-4);
        }
        lr = s.update(1.0, lr).unwrap();
        assert!((lr - 4e-5).abs() < 1e-20);
        assert_eq!(s.wait, 0);
        for _ in 0..11 {
            lr = s.update(1.0, lr).unwrap();
        }
        assert!((lr - 8e-6).abs() < 1e-20);
    }

    #[test]
    fn improving_loss_keeps_rate() {
        let mut s = PlateauSchedule::default();
        let mut lr = 2e-4;
        for i in 0..50 {
            lr = s.update(10.0 - i as f64 * 0.1, lr).unwrap();
        }
        assert_eq!(lr, 2e-4);
    }

    #[test]
    fn floor_and_nan() {
        let mut s = PlateauSchedule::new(0, 0.2, 1e-4);
        s.update(1.0, 2e-4).unwrap();
        assert_eq!(s.update(1.0, 2e-4).unwrap(), 1e-4);
        assert_eq!(s.update(1.0, 1e-4).unwrap(), 1e-4);
        assert!(s.update(f64::NAN, 1e-4).is_err());
    }
}
