//! Per-iteration and per-epoch run records and their CSV serialization.
//!
//! Headers are part of the external contract and must not drift. Floats are
//! rendered with Rust's shortest round-trip formatting, so identical runs
//! produce byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

pub const ITERATION_HEADER: &str = "iteration,epoch,lr,alpha_sgd,train_loss,comm_seconds_model";
pub const EPOCH_HEADER: &str = "epoch,val_loss,val_accuracy";

pub const ITERATION_LOG_FILE: &str = "train_log.csv";
pub const EPOCH_LOG_FILE: &str = "epoch_log.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: u64,
    pub epoch: f64,
    pub lr: f64,
    pub alpha_sgd: f64,
    pub train_loss: f64,
    pub comm_seconds_model: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub iterations: Vec<IterationRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl RunLog {
    pub fn push_iteration(&mut self, record: IterationRecord) {
        debug_assert!(
            self.iterations
                .last()
                .is_none_or(|last| record.iteration > last.iteration),
            "iterations must be strictly increasing"
        );
        self.iterations.push(record);
    }

    pub fn push_epoch(&mut self, record: EpochRecord) {
        debug_assert!(
            self.epochs
                .last()
                .map_or(record.epoch == 0, |last| record.epoch == last.epoch + 1),
            "epochs must be contiguous"
        );
        self.epochs.push(record);
    }

    pub fn iteration_csv(&self) -> String {
        let mut out = String::from(ITERATION_HEADER);
        out.push('\n');
        for r in &self.iterations {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.iteration, r.epoch, r.lr, r.alpha_sgd, r.train_loss, r.comm_seconds_model
            );
        }
        out
    }

    pub fn epoch_csv(&self) -> String {
        let mut out = String::from(EPOCH_HEADER);
        out.push('\n');
        for r in &self.epochs {
            let _ = writeln!(out, "{},{},{}", r.epoch, r.val_loss, r.val_accuracy);
        }
        out
    }

    /// Write both CSV files into `dir`, creating it if needed.
    pub fn write_csv_files(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(ITERATION_LOG_FILE), self.iteration_csv())?;
        std::fs::write(dir.join(EPOCH_LOG_FILE), self.epoch_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headers_are_pinned() {
        assert_eq!(
            ITERATION_HEADER,
            "iteration,epoch,lr,alpha_sgd,train_loss,comm_seconds_model"
        );
        assert_eq!(EPOCH_HEADER, "epoch,val_loss,val_accuracy");
    }

    #[test]
    fn csv_rendering_round_trips_floats() {
        let mut log = RunLog::default();
        log.push_iteration(IterationRecord {
            iteration: 0,
            epoch: 0.0,
            lr: 0.05,
            alpha_sgd: 0.009157819444367524,
            train_loss: std::f64::consts::LN_10,
            comm_seconds_model: 1.75e-4,
        });
        log.push_epoch(EpochRecord { epoch: 0, val_loss: 2.3, val_accuracy: 0.1015625 });

        let csv = log.iteration_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(ITERATION_HEADER));
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields[0].parse::<u64>().unwrap(), 0);
        assert_eq!(fields[3].parse::<f64>().unwrap(), 0.009157819444367524);
        assert_eq!(fields[4].parse::<f64>().unwrap(), std::f64::consts::LN_10);

        let ecsv = log.epoch_csv();
        assert!(ecsv.starts_with(EPOCH_HEADER));
        assert!(ecsv.contains("0,2.3,0.1015625"));
    }
}
