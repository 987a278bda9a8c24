use crate::error::{Error, Result};

/// Shape of a learning-rate schedule. The numbers it produces are scaled by
/// the owning [`LrSchedule`]'s `base`.
#[derive(Debug, Clone, PartialEq)]
pub enum LrKind {
    Constant,
    /// Multiply by `factor` once for every milestone epoch already reached.
    StepDecay {
        milestones: Vec<f64>,
        factor: f64,
    },
    /// Ramp linearly from `start` to `base` over `wp_epochs`, then follow
    /// `then` with the same `base`.
    LinearWarmup {
        start: f64,
        wp_epochs: f64,
        then: Box<LrKind>,
    },
    /// `base · (1 − iter/total)^power`, zero once `iter >= total`. A missing
    /// `total_iters` falls back to the run length passed to
    /// [`LrSchedule::lr_at`].
    Polynomial {
        power: f64,
        total_iters: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub kind: LrKind,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        LrSchedule {
            base,
            kind: LrKind::Constant,
        }
    }

    pub fn new(base: f64, kind: LrKind) -> Result<Self> {
        let s = LrSchedule { base, kind };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(Error::config_field("lr.base", "must be > 0"));
        }
        validate_kind(&self.kind)
    }

    /// Learning rate at fractional `epoch` and global iteration `iter` of a
    /// run lasting `total_iters` iterations.
    pub fn lr_at(&self, epoch: f64, iter: u64, total_iters: u64) -> f64 {
        kind_at(&self.kind, self.base, epoch, iter, total_iters)
    }
}

fn validate_kind(kind: &LrKind) -> Result<()> {
    match kind {
        LrKind::Constant => Ok(()),
        LrKind::StepDecay { milestones, factor } => {
            if milestones.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config_field(
                    "lr.milestones",
                    "milestones must be strictly increasing",
                ));
            }
            if !(*factor > 0.0 && factor.is_finite()) {
                return Err(Error::config_field("lr.factor", "must be > 0"));
            }
            Ok(())
        }
        LrKind::LinearWarmup {
            start,
            wp_epochs,
            then,
        } => {
            if !(*start >= 0.0 && start.is_finite()) {
                return Err(Error::config_field("lr.start", "must be >= 0"));
            }
            if !(*wp_epochs > 0.0 && wp_epochs.is_finite()) {
                return Err(Error::config_field("lr.wp_epochs", "must be > 0"));
            }
            validate_kind(then)
        }
        LrKind::Polynomial { power, .. } => {
            if !(*power > 0.0 && power.is_finite()) {
                return Err(Error::config_field("lr.power", "must be > 0"));
            }
            Ok(())
        }
    }
}

fn kind_at(kind: &LrKind, base: f64, epoch: f64, iter: u64, total_iters: u64) -> f64 {
    match kind {
        LrKind::Constant => base,
        LrKind::StepDecay { milestones, factor } => {
            let passed = milestones.iter().filter(|&&m| epoch >= m).count();
            base * factor.powi(passed as i32)
        }
        LrKind::LinearWarmup {
            start,
            wp_epochs,
            then,
        } => {
            if epoch < *wp_epochs {
                start + (base - start) * epoch / wp_epochs
            } else {
                kind_at(then, base, epoch, iter, total_iters)
            }
        }
        LrKind::Polynomial {
            power,
            total_iters: own,
        } => {
            let total = own.unwrap_or(total_iters);
            if total == 0 || iter >= total {
                0.0
            } else {
                base * (1.0 - iter as f64 / total as f64).powf(*power)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_after_first_milestone() {
        let s = LrSchedule::new(
            0.1,
            LrKind::StepDecay {
                milestones: vec![80.0, 120.0],
                factor: 0.1,
            },
        )
        .unwrap();
        assert!((s.lr_at(85.0, 0, 0) - 0.01).abs() < 1e-15);
        assert_eq!(s.lr_at(79.9, 0, 0), 0.1);
        assert!((s.lr_at(120.0, 0, 0) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn linear_warmup_endpoints() {
        let s = LrSchedule::new(
            0.8,
            LrKind::LinearWarmup {
                start: 0.1,
                wp_epochs: 5.0,
                then: Box::new(LrKind::Constant),
            },
        )
        .unwrap();
        assert_eq!(s.lr_at(0.0, 0, 100), 0.1);
        assert_eq!(s.lr_at(5.0, 0, 100), 0.8);
        assert!((s.lr_at(2.5, 0, 100) - 0.45).abs() < 1e-15);
        assert_eq!(s.lr_at(9.0, 0, 100), 0.8);
    }

    #[test]
    fn warmup_hands_over_to_polynomial() {
        let s = LrSchedule::new(
            0.8,
            LrKind::LinearWarmup {
                start: 0.1,
                wp_epochs: 5.0,
                then: Box::new(LrKind::Polynomial {
                    power: 2.0,
                    total_iters: None,
                }),
            },
        )
        .unwrap();
        assert!((s.lr_at(6.0, 50, 100) - 0.8 * 0.25).abs() < 1e-15);
    }

    #[test]
    fn polynomial_terminal_zero() {
        let s = LrSchedule::new(
            0.5,
            LrKind::Polynomial {
                power: 2.0,
                total_iters: Some(10),
            },
        )
        .unwrap();
        assert_eq!(s.lr_at(0.0, 10, 999), 0.0);
        assert_eq!(s.lr_at(0.0, 0, 999), 0.5);
    }

    #[test]
    fn invalid_schedules_rejected() {
        let bad = LrSchedule::new(
            0.1,
            LrKind::StepDecay {
                milestones: vec![10.0, 10.0],
                factor: 0.1,
            },
        );
        assert!(bad.is_err());
        assert!(LrSchedule::new(
            0.1,
            LrKind::Polynomial {
                power: 0.0,
                total_iters: None
            }
        )
        .is_err());
        assert!(LrSchedule::new(0.0, LrKind::Constant).is_err());
    }
}
