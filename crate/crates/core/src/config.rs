//! Run configuration: flat `key=value` files, dot-notation overrides, and
//! the derived quantities (cluster shape, base learning rate, scaled
//! transition hyperparameters).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::collective::CommPrecision;
use crate::error::{Error, Result};
use crate::lr_schedule::{self, ClusterShape, LrSchedule};
use crate::optimizer::OptimizerHyper;
use crate::syncbn::VarianceCombine;

/// Environment variable consulted when no `out_dir` key is configured.
pub const OUT_DIR_ENV: &str = "LARGEBATCH_OUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    SlowStart,
    Goyal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// RMSprop warm-up blending into momentum SGD.
    Hybrid,
    /// Momentum SGD from iteration zero.
    Sgd,
    /// RMSprop from iteration zero, never transitioning.
    Rmsprop,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSource {
    Synthetic,
    File(PathBuf),
}

/// Complete description of one training run. The `key=value` file keys are
/// the fields listed in [`RunConfig::apply_override`]; the remaining fields
/// are library-level knobs with fixed defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub b_local: usize,
    pub epochs: u32,
    /// Iterations per epoch; `None` derives `train_examples / b_total`.
    pub iterations_per_epoch: Option<usize>,
    pub model_layers: Vec<usize>,
    pub model_batchnorm: bool,
    pub schedule: ScheduleKind,
    pub optimizer: OptimizerKind,
    pub comm_precision: CommPrecision,
    /// Transition hyperparameters in 90-epoch units; scaled by
    /// `epochs / 90` at run time like the schedule phases.
    pub beta_center: f64,
    pub beta_period: f64,
    pub eta_rmsprop: f64,
    pub dataset: DatasetSource,
    pub out_dir: PathBuf,

    // library-level knobs (not config-file keys)
    pub synthetic_examples: usize,
    pub synthetic_separation: f64,
    pub init_scale: f64,
    pub weight_decay: f64,
    pub variance_combine: VarianceCombine,
    /// Multiplier on the linear-scaling-rule base rate; used by stress
    /// experiments.
    pub eta_base_multiplier: f64,
}

impl Default for RunConfig {
    /// Desk-scale default: 8 workers x 32 local batch (b_total 256), 30
    /// epochs, a batch-normalized [64, 128, 64, 10] perceptron, and a
    /// well-separated synthetic 10-class dataset of 51,200 examples.
    fn default() -> Self {
        Self {
            seed: 1,
            workers: 8,
            b_local: 32,
            epochs: 30,
            iterations_per_epoch: None,
            model_layers: vec![64, 128, 64, 10],
            model_batchnorm: true,
            schedule: ScheduleKind::SlowStart,
            optimizer: OptimizerKind::Hybrid,
            comm_precision: CommPrecision::Half16,
            beta_center: 10.0,
            beta_period: 5.0,
            eta_rmsprop: 0.0003,
            dataset: DatasetSource::Synthetic,
            out_dir: default_out_dir(),
            synthetic_examples: 51_200,
            synthetic_separation: 6.0,
            init_scale: 1.0,
            weight_decay: 1e-4,
            variance_combine: VarianceCombine::Simple,
            eta_base_multiplier: 1.0,
        }
    }
}

fn default_out_dir() -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from("runs"),
    }
}

impl RunConfig {
    /// Parse a flat `key=value` config text over the defaults. Blank lines
    /// and `#` comments are skipped; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
            })?;
            cfg.apply_override(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    /// Apply one `key=value` pair; keys use the same dot notation as the
    /// config file.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "workers" => self.workers = parse_num(key, value)?,
            "b_local" => self.b_local = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "iterations_per_epoch" => {
                self.iterations_per_epoch = Some(parse_num(key, value)?);
            }
            "model.layers" => {
                let sizes: std::result::Result<Vec<usize>, _> =
                    value.split(',').map(|s| s.trim().parse()).collect();
                self.model_layers = sizes.map_err(|_| {
                    Error::Config(format!("model.layers: bad size list {value:?}"))
                })?;
            }
            "model.batchnorm" => self.model_batchnorm = parse_bool(key, value)?,
            "schedule" => {
                self.schedule = match value {
                    "slow_start" => ScheduleKind::SlowStart,
                    "goyal" => ScheduleKind::Goyal,
                    other => {
                        return Err(Error::Config(format!(
                            "schedule: expected slow_start or goyal, got {other:?}"
                        )))
                    }
                }
            }
            "optimizer" => {
                self.optimizer = match value {
                    "hybrid" => OptimizerKind::Hybrid,
                    "sgd" => OptimizerKind::Sgd,
                    "rmsprop" => OptimizerKind::Rmsprop,
                    other => {
                        return Err(Error::Config(format!(
                            "optimizer: expected hybrid, sgd, or rmsprop, got {other:?}"
                        )))
                    }
                }
            }
            "comm.precision" => self.comm_precision = value.parse()?,
            "beta_center" => self.beta_center = parse_num(key, value)?,
            "beta_period" => self.beta_period = parse_num(key, value)?,
            "eta_rmsprop" => self.eta_rmsprop = parse_num(key, value)?,
            "dataset" => {
                self.dataset = if value == "synthetic" {
                    DatasetSource::Synthetic
                } else if let Some(path) = value.strip_prefix("file:") {
                    DatasetSource::File(PathBuf::from(path))
                } else {
                    return Err(Error::Config(format!(
                        "dataset: expected synthetic or file:<path>, got {value:?}"
                    )));
                }
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if self.b_local == 0 {
            return Err(Error::Config("b_local must be >= 1".into()));
        }
        if self.epochs != 0 && self.epochs < 4 {
            return Err(Error::Config(
                "epochs must be 0 or >= 4 (four schedule phases)".into(),
            ));
        }
        if self.model_layers.len() < 3 {
            return Err(Error::Config(format!(
                "model.layers needs input, hidden..., classes; got {:?}",
                self.model_layers
            )));
        }
        self.hyper().validate()?;
        Ok(())
    }

    pub fn cluster_shape(&self) -> Result<ClusterShape> {
        ClusterShape::new(self.workers, self.b_local)
    }

    pub fn b_total(&self) -> usize {
        self.workers * self.b_local
    }

    /// Linear-scaling-rule base rate times the stress multiplier.
    pub fn eta_base(&self) -> Result<f64> {
        Ok(lr_schedule::eta_base(&self.cluster_shape()?) * self.eta_base_multiplier)
    }

    pub fn lr_schedule(&self) -> Result<LrSchedule> {
        let eta = self.eta_base()?;
        match self.schedule {
            ScheduleKind::SlowStart => LrSchedule::slow_start(eta, self.epochs),
            ScheduleKind::Goyal => LrSchedule::goyal(eta, self.epochs),
        }
    }

    /// Optimizer hyperparameters with the transition window rescaled from
    /// 90-epoch units to this run's length.
    pub fn hyper(&self) -> OptimizerHyper {
        let scale = if self.epochs == 0 { 1.0 } else { self.epochs as f64 / 90.0 };
        OptimizerHyper {
            eta_rmsprop: self.eta_rmsprop,
            beta_center: self.beta_center * scale,
            beta_period: self.beta_period * scale,
            ..OptimizerHyper::default()
        }
    }

    /// The config echoed back as sorted `key=value` lines (file keys only),
    /// as embedded in checkpoints.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "b_local={}", self.b_local);
        let _ = writeln!(s, "beta_center={}", self.beta_center);
        let _ = writeln!(s, "beta_period={}", self.beta_period);
        let _ = writeln!(
            s,
            "comm.precision={}",
            self.comm_precision
        );
        let _ = writeln!(
            s,
            "dataset={}",
            match &self.dataset {
                DatasetSource::Synthetic => "synthetic".to_string(),
                DatasetSource::File(p) => format!("file:{}", p.display()),
            }
        );
        let _ = writeln!(s, "epochs={}", self.epochs);
        if let Some(ipe) = self.iterations_per_epoch {
            let _ = writeln!(s, "iterations_per_epoch={ipe}");
        }
        let _ = writeln!(s, "eta_rmsprop={}", self.eta_rmsprop);
        let _ = writeln!(
            s,
            "model.batchnorm={}",
            self.model_batchnorm
        );
        let _ = writeln!(
            s,
            "model.layers={}",
            self.model_layers
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        );
        let _ = writeln!(
            s,
            "optimizer={}",
            match self.optimizer {
                OptimizerKind::Hybrid => "hybrid",
                OptimizerKind::Sgd => "sgd",
                OptimizerKind::Rmsprop => "rmsprop",
            }
        );
        let _ = writeln!(s, "out_dir={}", self.out_dir.display());
        let _ = writeln!(
            s,
            "schedule={}",
            match self.schedule {
                ScheduleKind::SlowStart => "slow_start",
                ScheduleKind::Goyal => "goyal",
            }
        );
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "workers={}", self.workers);
        s
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected true or false, got {other:?}"))),
    }
}
