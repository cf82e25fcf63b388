//! Learning-rate schedules: plain linear decay and the cyclic sawtooth
//! used while pruning. At each cycle boundary the rate resets to the peak
//! and decays linearly to zero at the next boundary (or the end of the
//! run).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrKind {
    LinearDecay,
    Cyclic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: LrKind,
    pub peak_lr: f64,
    /// Global steps where the rate resets to the peak. Always starts at 0.
    pub cycle_boundaries: Vec<usize>,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn linear_decay(peak_lr: f64, total_steps: usize) -> Self {
        LrSchedule {
            kind: LrKind::LinearDecay,
            peak_lr,
            cycle_boundaries: vec![0],
            total_steps,
        }
    }

    pub fn cyclic(peak_lr: f64, mut boundaries: Vec<usize>, total_steps: usize) -> Result<Self> {
        if boundaries.first() != Some(&0) {
            boundaries.insert(0, 0);
        }
        boundaries.dedup();
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("cycle boundaries must be increasing".into()));
        }
        if boundaries.last().copied().unwrap_or(0) >= total_steps {
            return Err(Error::Config(format!(
                "cycle boundary {} at or beyond total steps {total_steps}",
                boundaries.last().unwrap()
            )));
        }
        Ok(LrSchedule {
            kind: LrKind::Cyclic,
            peak_lr,
            cycle_boundaries: boundaries,
            total_steps,
        })
    }

    /// Piecewise-linear sawtooth. `lr(boundary) = peak`, decaying to 0 at
    /// the next boundary; the final segment reaches 0 at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        let seg = match self.cycle_boundaries.binary_search(&step) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let seg_start = self.cycle_boundaries[seg];
        let seg_end = self
            .cycle_boundaries
            .get(seg + 1)
            .copied()
            .unwrap_or(self.total_steps);
        let frac = (step - seg_start) as f64 / (seg_end - seg_start) as f64;
        self.peak_lr * (1.0 - frac)
    }
}

/// Convert cycle boundaries given in epoch fractions to global steps,
/// deduplicated after rounding.
pub fn boundaries_from_epochs(epoch_fracs: &[f64], steps_per_epoch: usize) -> Vec<usize> {
    let mut steps: Vec<usize> = epoch_fracs
        .iter()
        .map(|e| (e * steps_per_epoch as f64).round() as usize)
        .collect();
    steps.sort_unstable();
    steps.dedup();
    steps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_at_boundaries_zero_at_end_midpoint_half() {
        let s = LrSchedule::cyclic(5e-4, vec![0, 100, 200], 300).unwrap();
        assert_eq!(s.lr_at(0), 5e-4);
        assert_eq!(s.lr_at(100), 5e-4);
        assert_eq!(s.lr_at(200), 5e-4);
        assert_eq!(s.lr_at(300), 0.0);
        assert!((s.lr_at(50) - 2.5e-4).abs() < 1e-18);
        assert!((s.lr_at(150) - 2.5e-4).abs() < 1e-18);
    }

    #[test]
    fn linear_decay_is_single_segment() {
        let s = LrSchedule::linear_decay(5e-5, 1000);
        assert_eq!(s.lr_at(0), 5e-5);
        assert!((s.lr_at(500) - 2.5e-5).abs() < 1e-18);
        assert_eq!(s.lr_at(1000), 0.0);
        assert_eq!(s.lr_at(5000), 0.0);
    }

    #[test]
    fn sawtooth_never_negative_and_resets_exactly() {
        let s = LrSchedule::cyclic(1.0, vec![0, 7, 31], 60).unwrap();
        let mut prev = f64::INFINITY;
        for step in 0..=60 {
            let lr = s.lr_at(step);
            assert!((0.0..=1.0).contains(&lr));
            if s.cycle_boundaries.contains(&step) {
                assert_eq!(lr, 1.0);
            } else {
                // Within a segment the rate strictly decreases.
                assert!(lr < prev);
            }
            prev = lr;
        }
    }

    #[test]
    fn epoch_fraction_boundaries() {
        let b = boundaries_from_epochs(&[0.0, 0.5, 1.0, 1.5, 2.0, 2.5], 200);
        assert_eq!(b, vec![0, 100, 200, 300, 400, 500]);
        // Tiny epochs collapse duplicate boundaries.
        let b = boundaries_from_epochs(&[0.0, 0.5, 1.0], 1);
        assert_eq!(b, vec![0, 1]);
    }

    #[test]
    fn invalid_boundaries_rejected() {
        assert!(LrSchedule::cyclic(1.0, vec![0, 5, 3], 10).is_err());
        assert!(LrSchedule::cyclic(1.0, vec![0, 10], 10).is_err());
        // Duplicates collapse rather than error.
        assert!(LrSchedule::cyclic(1.0, vec![0, 5, 5], 10).is_ok());
    }
}
