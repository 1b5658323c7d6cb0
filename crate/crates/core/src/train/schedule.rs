use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate bounds of a cyclical schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrBounds {
    pub low: f64,
    pub high: f64,
}

impl LrBounds {
    /// Bounds used for teacher fine-tuning of pretrained encoders.
    pub const PRETRAINED_FINETUNE: LrBounds = LrBounds { low: 1e-7, high: 1e-5 };
    /// Bounds used for distillation into a pretrained-initialized student.
    pub const PRETRAINED_DISTILL: LrBounds = LrBounds { low: 1e-7, high: 1e-4 };

    /// Desk-scale bounds for randomly initialized encoders.
    pub const DESK_FINETUNE: LrBounds = LrBounds { low: 1e-5, high: 3e-3 };
    pub const DESK_DISTILL: LrBounds = LrBounds { low: 1e-5, high: 3e-3 };

    pub fn validate(&self) -> Result<()> {
        if !(self.low > 0.0 && self.low <= self.high && self.high.is_finite()) {
            return Err(Error::Config(format!(
                "learning-rate bounds need 0 < low <= high, got ({}, {})",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

/// Triangular cyclical schedule: rises linearly from `low` to `high` over half
/// a cycle and falls back over the second half.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CyclicalSchedule {
    bounds: LrBounds,
    cycle_length_steps: usize,
}

impl CyclicalSchedule {
    pub fn new(bounds: LrBounds, cycle_length_steps: usize) -> Result<Self> {
        bounds.validate()?;
        if cycle_length_steps == 0 {
            return Err(Error::Config("cycle length must be positive".into()));
        }
        Ok(Self {
            bounds,
            cycle_length_steps,
        })
    }

    pub fn bounds(&self) -> LrBounds {
        self.bounds
    }

    pub fn cycle_length(&self) -> usize {
        self.cycle_length_steps
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let LrBounds { low, high } = self.bounds;
        let half = self.cycle_length_steps as f64 / 2.0;
        let pos = (step % self.cycle_length_steps) as f64;
        let frac = 1.0 - (pos / half - 1.0).abs();
        (low + (high - low) * frac).clamp(low, high)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn triangle_landmarks() {
        let s = CyclicalSchedule::new(LrBounds { low: 1e-7, high: 1e-4 }, 10).unwrap();
        assert_eq!(s.lr_at(0), 1e-7);
        assert_eq!(s.lr_at(5), 1e-4);
        assert_eq!(s.lr_at(10), 1e-7);
        assert!(s.lr_at(2) < s.lr_at(3) && s.lr_at(7) > s.lr_at(8));
    }

    #[test]
    fn invalid_bounds() {
        assert!(CyclicalSchedule::new(LrBounds { low: 1e-3, high: 1e-5 }, 4).is_err());
        assert!(CyclicalSchedule::new(LrBounds { low: 1e-5, high: 1e-3 }, 0).is_err());
    }

    proptest! {
        #[test]
        fn stays_in_bounds_and_is_periodic(low in 1e-8f64..1e-3, span in 0.0f64..1e-2, cycle in 1usize..200, step in 0usize..10_000) {
            let b = LrBounds { low, high: low + span };
            let s = CyclicalSchedule::new(b, cycle).unwrap();
            let lr = s.lr_at(step);
            prop_assert!(lr >= b.low && lr <= b.high);
            prop_assert_eq!(lr.to_bits(), s.lr_at(step + cycle).to_bits());
        }
    }
}
