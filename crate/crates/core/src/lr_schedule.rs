//! Learning-rate policy: the linear scaling rule for the base rate and the
//! piecewise-constant slow-start / baseline schedules.
//!
//! The base rate follows `0.1 * b_total / 256`. The slow-start schedule runs
//! a lower, longer first phase than the baseline; both are piecewise constant
//! with right-open phase boundaries. For runs shorter or longer than the
//! canonical 90 epochs the phase lengths scale proportionally.

use crate::error::{Error, Result};

/// Worker-count / batch-size triple driving the linear scaling rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterShape {
    n_workers: usize,
    b_local: usize,
}

impl ClusterShape {
    pub fn new(n_workers: usize, b_local: usize) -> Result<Self> {
        if n_workers == 0 {
            return Err(Error::InvalidHyper { name: "n_workers", value: 0.0 });
        }
        if b_local == 0 {
            return Err(Error::InvalidHyper { name: "b_local", value: 0.0 });
        }
        Ok(Self { n_workers, b_local })
    }

    pub fn n_workers(&self) -> usize {
        self.n_workers
    }

    pub fn b_local(&self) -> usize {
        self.b_local
    }

    /// Total minibatch size across all workers.
    pub fn b_total(&self) -> usize {
        self.n_workers * self.b_local
    }
}

/// Linear scaling rule: `0.1 * b_total / 256`.
pub fn eta_base(shape: &ClusterShape) -> f64 {
    0.1 * shape.b_total() as f64 / 256.0
}

/// One right-open schedule phase, as a multiplier of the base rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase {
    pub start_epoch: f64,
    pub end_epoch: f64,
    pub multiplier: f64,
}

/// Piecewise-constant learning-rate schedule. Phases are contiguous,
/// non-overlapping, and cover `[0, total_epochs)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    eta_base: f64,
    phases: Vec<Phase>,
    total_epochs: f64,
}

/// Canonical 90-epoch phase layout: boundary epochs and multipliers.
const SLOW_START_LAYOUT: ([f64; 5], [f64; 4]) =
    ([0.0, 40.0, 70.0, 85.0, 90.0], [0.5, 0.075, 0.01, 0.001]);
const GOYAL_LAYOUT: ([f64; 5], [f64; 4]) =
    ([0.0, 30.0, 60.0, 80.0, 90.0], [1.0, 0.1, 0.01, 0.001]);

impl LrSchedule {
    fn from_layout(
        eta_base: f64,
        total_epochs: u32,
        layout: ([f64; 5], [f64; 4]),
    ) -> Result<Self> {
        if eta_base <= 0.0 {
            return Err(Error::InvalidHyper { name: "eta_base", value: eta_base });
        }
        if total_epochs < 4 {
            return Err(Error::TooFewEpochs { min: 4, got: total_epochs });
        }
        let scale = total_epochs as f64 / 90.0;
        let (bounds, multipliers) = layout;
        let phases = multipliers
            .iter()
            .enumerate()
            .map(|(i, &multiplier)| Phase {
                start_epoch: bounds[i] * scale,
                end_epoch: bounds[i + 1] * scale,
                multiplier,
            })
            .collect();
        Ok(Self {
            eta_base,
            phases,
            total_epochs: total_epochs as f64,
        })
    }

    /// Slow-start schedule: 0.5x for the first 4/9 of training, then 0.075x,
    /// 0.01x, and 0.001x.
    pub fn slow_start(eta_base: f64, total_epochs: u32) -> Result<Self> {
        Self::from_layout(eta_base, total_epochs, SLOW_START_LAYOUT)
    }

    /// Baseline schedule: 1x, 0.1x, 0.01x, 0.001x over 30/30/20/10 epoch
    /// fractions.
    pub fn goyal(eta_base: f64, total_epochs: u32) -> Result<Self> {
        Self::from_layout(eta_base, total_epochs, GOYAL_LAYOUT)
    }

    pub fn eta_base(&self) -> f64 {
        self.eta_base
    }

    pub fn total_epochs(&self) -> f64 {
        self.total_epochs
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    /// Learning rate at a (fractional) epoch. Boundaries are right-open:
    /// the epoch exactly at a phase boundary belongs to the later phase.
    pub fn lr_at(&self, epoch: f64) -> Result<f64> {
        if epoch.is_nan() || epoch < 0.0 || epoch >= self.total_epochs {
            return Err(Error::EpochOutOfRange {
                epoch,
                total_epochs: self.total_epochs,
            });
        }
        let phase = self
            .phases
            .iter()
            .find(|p| epoch >= p.start_epoch && epoch < p.end_epoch)
            .expect("phases cover [0, total_epochs)");
        Ok(self.eta_base * phase.multiplier)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(n: usize, b: usize) -> ClusterShape {
        ClusterShape::new(n, b).unwrap()
    }

    #[test]
    fn linear_scaling_anchor_points() {
        assert_eq!(eta_base(&shape(1024, 32)), 12.8);
        assert_eq!(eta_base(&shape(1, 256)), 0.1);
        assert_eq!(eta_base(&shape(4, 8)), 0.0125);
    }

    #[test]
    fn eta_base_is_linear_in_b_total() {
        for k in [2usize, 3, 8, 17] {
            let base = eta_base(&shape(1, 64));
            let scaled = eta_base(&shape(k, 64));
            assert!((scaled - k as f64 * base).abs() < 1e-15 * scaled.abs());
        }
    }

    #[test]
    fn slow_start_values_at_90_epochs() {
        let s = LrSchedule::slow_start(12.8, 90).unwrap();
        assert_eq!(s.lr_at(0.0).unwrap(), 6.4);
        assert!((s.lr_at(40.0).unwrap() - 0.96).abs() < 1e-12);
        assert!((s.lr_at(70.0).unwrap() - 0.128).abs() < 1e-12);
        assert!((s.lr_at(89.5).unwrap() - 0.0128).abs() < 1e-12);
    }

    #[test]
    fn goyal_values_at_90_epochs() {
        let s = LrSchedule::goyal(12.8, 90).unwrap();
        assert_eq!(s.lr_at(0.0).unwrap(), 12.8);
        assert!((s.lr_at(30.0).unwrap() - 1.28).abs() < 1e-12);
        assert!((s.lr_at(85.0).unwrap() - 0.0128).abs() < 1e-12);
    }

    #[test]
    fn boundaries_are_right_open() {
        let s = LrSchedule::slow_start(12.8, 90).unwrap();
        assert_eq!(s.lr_at(39.999).unwrap(), 6.4);
        assert!((s.lr_at(40.0).unwrap() - 0.96).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_epochs_error() {
        let s = LrSchedule::slow_start(1.0, 90).unwrap();
        assert!(matches!(s.lr_at(90.0), Err(Error::EpochOutOfRange { .. })));
        assert!(s.lr_at(-0.001).is_err());
        assert!(s.lr_at(f64::NAN).is_err());
    }

    #[test]
    fn too_few_epochs_rejected() {
        assert!(matches!(
            LrSchedule::slow_start(1.0, 3),
            Err(Error::TooFewEpochs { .. })
        ));
        assert!(LrSchedule::goyal(1.0, 0).is_err());
        assert!(LrSchedule::slow_start(0.0, 90).is_err());
    }

    #[test]
    fn phase_lengths_scale_proportionally() {
        let s = LrSchedule::slow_start(1.0, 30).unwrap();
        let p = s.phases();
        assert!((p[0].end_epoch - 40.0 / 3.0).abs() < 1e-12);
        assert!((p[3].start_epoch - 85.0 / 3.0).abs() < 1e-12);
        assert_eq!(p[3].end_epoch, 30.0);
    }

    #[test]
    fn lr_is_nonincreasing_across_phases() {
        for s in [
            LrSchedule::slow_start(3.7, 90).unwrap(),
            LrSchedule::goyal(3.7, 45).unwrap(),
        ] {
            let mut prev = f64::INFINITY;
            let mut e = 0.0;
            while e < s.total_epochs() {
                let lr = s.lr_at(e).unwrap();
                assert!(lr <= prev + 1e-15, "lr increased at epoch {e}");
                prev = lr;
                e += 0.25;
            }
        }
    }

    #[test]
    fn integral_over_unit_base_rate() {
        // sum over a 0.001-epoch grid approximates
        // 0.5*40 + 0.075*30 + 0.01*15 + 0.001*5 = 22.405
        let s = LrSchedule::slow_start(1.0, 90).unwrap();
        let step = 0.001;
        let n = (90.0 / step) as usize;
        let total: f64 = (0..n).map(|i| s.lr_at(i as f64 * step).unwrap() * step).sum();
        assert!((total - 22.405).abs() < 1e-3, "integral {total}");
    }
}
