//! Structured-text checkpoints.
//!
//! One document holds the format version, a config echo, the iteration
//! counter, every named parameter tensor, the optimizer state tensors, and
//! any synchronized batch-norm statistics. Numbers are serialized as
//! shortest round-trip decimals, so parse(render(c)) reproduces every bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
const HEADER: &str = "largebatch-checkpoint v1";

/// Tensor sections a checkpoint can carry, keyed by section kind + name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub config_echo: String,
    pub iteration: u64,
    pub params: BTreeMap<String, Tensor>,
    pub opt_sq_grad: BTreeMap<String, Tensor>,
    pub opt_velocity: BTreeMap<String, Tensor>,
    /// Synchronized batch-norm statistics per layer name: (mean, var).
    pub bn_synced: BTreeMap<String, (Tensor, Tensor)>,
}

const KIND_PARAM: &str = "param";
const KIND_OPT_SQ: &str = "opt_sq_grad";
const KIND_OPT_VEL: &str = "opt_velocity";
const KIND_BN_MEAN: &str = "bn_synced_mean";
const KIND_BN_VAR: &str = "bn_synced_var";

impl Checkpoint {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{HEADER}");
        let _ = writeln!(out, "[config]");
        for line in self.config_echo.lines() {
            let _ = writeln!(out, "{line}");
        }
        let _ = writeln!(out, "[state]");
        let _ = writeln!(out, "iteration={}", self.iteration);
        for (name, t) in &self.params {
            render_tensor(&mut out, KIND_PARAM, name, t);
        }
        for (name, t) in &self.opt_sq_grad {
            render_tensor(&mut out, KIND_OPT_SQ, name, t);
        }
        for (name, t) in &self.opt_velocity {
            render_tensor(&mut out, KIND_OPT_VEL, name, t);
        }
        for (name, (mean, var)) in &self.bn_synced {
            render_tensor(&mut out, KIND_BN_MEAN, name, mean);
            render_tensor(&mut out, KIND_BN_VAR, name, var);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.render())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().peekable();
        if lines.next() != Some(HEADER) {
            return Err(Error::Checkpoint(format!("missing header {HEADER:?}")));
        }
        if lines.next() != Some("[config]") {
            return Err(Error::Checkpoint("expected [config] section".into()));
        }
        let mut config_echo = String::new();
        while let Some(&line) = lines.peek() {
            if line.starts_with('[') {
                break;
            }
            config_echo.push_str(line);
            config_echo.push('\n');
            lines.next();
        }
        if lines.next() != Some("[state]") {
            return Err(Error::Checkpoint("expected [state] section".into()));
        }
        let iteration = lines
            .next()
            .and_then(|l| l.strip_prefix("iteration="))
            .ok_or_else(|| Error::Checkpoint("expected iteration=".into()))?
            .parse()
            .map_err(|e| Error::Checkpoint(format!("bad iteration: {e}")))?;

        let mut checkpoint = Checkpoint {
            config_echo,
            iteration,
            ..Checkpoint::default()
        };
        let mut bn_means: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut bn_vars: BTreeMap<String, Tensor> = BTreeMap::new();

        while let Some(line) = lines.next() {
            let inner = line
                .strip_prefix("[tensor ")
                .and_then(|s| s.strip_suffix(']'))
                .ok_or_else(|| Error::Checkpoint(format!("expected [tensor ...], got {line:?}")))?;
            let (kind, name) = inner
                .split_once(' ')
                .ok_or_else(|| Error::Checkpoint(format!("bad tensor section {inner:?}")))?;
            let shape_line = lines
                .next()
                .and_then(|l| l.strip_prefix("shape="))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: expected shape=")))?;
            let
                shape: Vec<usize> = shape_line
                .split(',')
                .map(|s| s.parse().map_err(|e| Error::Checkpoint(format!("{name}: bad shape: {e}"))))
                .collect::<Result<_>>()?;
            let data_line = lines
                .next()
                .and_then(|l| l.strip_prefix("data="))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: expected data=")))?;
            let data: Vec<f64> = if data_line.is_empty() {
                Vec::new()
            } else {
                data_line
                    .split(' ')
                    .map(|s| {
                        s.parse()
                            .map_err(|e| Error::Checkpoint(format!("{name}: bad value {s:?}: {e}")))
                    })
                    .collect::<Result<_>>()?
            };
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            match kind {
                KIND_PARAM => {
                    checkpoint.params.insert(name.to_string(), tensor);
                }
                KIND_OPT_SQ => {
                    checkpoint.opt_sq_grad.insert(name.to_string(), tensor);
                }
                KIND_OPT_VEL => {
                    checkpoint.opt_velocity.insert(name.to_string(), tensor);
                }
                KIND_BN_MEAN => {
                    bn_means.insert(name.to_string(), tensor);
                }
                KIND_BN_VAR => {
                    bn_vars.insert(name.to_string(), tensor);
                }
                other => {
                    return Err(Error::Checkpoint(format!("unknown tensor kind {other:?}")))
                }
            }
        }

        for (name, mean) in bn_means {
            let var = bn_vars.remove(&name).ok_or_else(|| {
                Error::Checkpoint(format!("bn stats for {name} missing variance"))
            })?;
            checkpoint.bn_synced.insert(name, (mean, var));
        }
        if let Some(name) = bn_vars.into_keys().next() {
            return Err(Error::Checkpoint(format!("bn stats for {name} missing mean")));
        }
        Ok(checkpoint)
    }
}

fn render_tensor(out: &mut String, kind: &str, name: &str, t: &Tensor) {
    let _ = writeln!(out, "[tensor {kind} {name}]");
    let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    let _ = writeln!(out, "shape={}", shape.join(","));
    out.push_str("data=");
    for (i, v) in t.data().iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}
