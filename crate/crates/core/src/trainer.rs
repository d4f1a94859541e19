//! Synchronous data-parallel training harness.
//!
//! W simulated workers each run forward/backward on their slice of the
//! global minibatch; gradients are all-reduce-averaged at the configured
//! communication precision; the update is computed once from the averaged
//! gradient and broadcast, so replicas stay bit-identical by construction
//! (and are checked every step). Before each validation pass the workers'
//! batch-norm statistics are synchronized.
//!
//! Sampling uses a per-epoch global permutation of the training split cut
//! into `b_total`-sized global batches, each worker taking its `b_local`
//! slice. The permutation depends only on `(seed, epoch)`, so runs with the
//! same total batch produce the same sample order regardless of how it is
//! split across workers — and every worker's shard partitions the epoch with
//! no overlap.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, CHECKPOINT_FILE};
use crate::collective::{self, all_reduce, CommPrecision, CostModel, ReduceOp};
use crate::config::{DatasetSource, OptimizerKind, RunConfig};
use crate::dataset::{self, Dataset};
use crate::error::{Error, Result};
use crate::lr_schedule::LrSchedule;
use crate::model::{Mlp, ModelSpec, ParamMap};
use crate::optimizer::{blend_at, step, BlendCoefficients, OptimizerHyper, OptimizerState};
use crate::rng::Rng;
use crate::runlog::{EpochRecord, IterationRecord, RunLog};
use crate::syncbn::{sync_statistics, BnLayerState};
use crate::tensor::Tensor;

// substream tags off the run seed
const STREAM_DATASET: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

const VALIDATION_BATCH: usize = 256;

/// One simulated worker: its model replica (parameters plus per-worker
/// batch-norm statistics).
#[derive(Debug, Clone)]
pub struct WorkerReplica {
    pub worker_id: usize,
    pub model: Mlp,
}

/// Outcome of a completed run.
#[derive(Debug)]
pub struct RunSummary {
    pub log: RunLog,
    pub final_val_accuracy: Option<f64>,
    pub out_dir: PathBuf,
    /// Elements that saturated on the half-precision wire across the run.
    pub saturated_values: u64,
}

pub struct Trainer {
    cfg: RunConfig,
    dataset: Dataset,
    replicas: Vec<WorkerReplica>,
    opt_states: BTreeMap<String, OptimizerState>,
    schedule: Option<LrSchedule>,
    hyper: OptimizerHyper,
    cost_model: CostModel,
    iterations_per_epoch: usize,
    iteration: u64,
    log: RunLog,
    saturated_values: u64,
    epoch_perm: Vec<usize>,
    perm_for_epoch: Option<u64>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let base_rng = Rng::new(cfg.seed);

        let spec = ModelSpec::new(cfg.model_layers.clone(), cfg.model_batchnorm, cfg.init_scale)?;
        let dataset = match &cfg.dataset {
            DatasetSource::Synthetic => dataset::make_synthetic(
                &mut base_rng.substream(STREAM_DATASET),
                spec.classes(),
                cfg.synthetic_examples,
                spec.input_dim(),
                cfg.synthetic_separation,
            )?,
            DatasetSource::File(path) => {
                let d = dataset::load_file(path)?;
                if d.input_dim() != spec.input_dim() || d.classes() != spec.classes() {
                    return Err(Error::Config(format!(
                        "dataset is {}d/{} classes but model.layers wants {}d/{}",
                        d.input_dim(),
                        d.classes(),
                        spec.input_dim(),
                        spec.classes()
                    )));
                }
                d
            }
        };

        let b_total = cfg.b_total();
        let iterations_per_epoch = match cfg.iterations_per_epoch {
            Some(n) => n,
            None => dataset.train_count() / b_total,
        };
        if cfg.epochs > 0 && iterations_per_epoch == 0 {
            return Err(Error::Config(format!(
                "b_total {b_total} exceeds the {} training examples",
                dataset.train_count()
            )));
        }
        // zero-epoch runs never iterate; keep the divisor positive anyway
        let iterations_per_epoch = iterations_per_epoch.max(1);

        let model = Mlp::init(spec, &mut base_rng.substream(STREAM_INIT));
        let opt_states = model
            .param_map()
            .iter()
            .map(|(name, t)| (name.clone(), OptimizerState::zeros(t.shape())))
            .collect();
        let replicas = (0..cfg.workers)
            .map(|worker_id| WorkerReplica { worker_id, model: model.clone() })
            .collect();

        let schedule = if cfg.epochs == 0 { None } else { Some(cfg.lr_schedule()?) };
        let hyper = cfg.hyper();

        Ok(Self {
            cfg,
            dataset,
            replicas,
            opt_states,
            schedule,
            hyper,
            cost_model: CostModel::default(),
            iterations_per_epoch,
            iteration: 0,
            log: RunLog::default(),
            saturated_values: 0,
            epoch_perm: Vec::new(),
            perm_for_epoch: None,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn replicas(&self) -> &[WorkerReplica] {
        &self.replicas
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.iterations_per_epoch
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn saturated_values(&self) -> u64 {
        self.saturated_values
    }

    /// Current parameters (identical on every replica).
    pub fn params(&self) -> ParamMap {
        self.replicas[0].model.param_map()
    }

    /// Fractional epoch driving the schedules: exactly
    /// `iteration / iterations_per_epoch`.
    pub fn fractional_epoch(&self) -> f64 {
        self.iteration as f64 / self.iterations_per_epoch as f64
    }

    /// Blend coefficients for the configured optimizer at an epoch.
    pub fn blend_for(&self, epoch: f64) -> Result<BlendCoefficients> {
        let schedule = self.schedule.as_ref().ok_or_else(|| {
            Error::Config("schedules are undefined for a zero-epoch run".into())
        })?;
        let lr = schedule.lr_at(epoch)?;
        Ok(match self.cfg.optimizer {
            OptimizerKind::Hybrid => blend_at(epoch, lr, &self.hyper)?,
            OptimizerKind::Sgd => BlendCoefficients::pure_sgd(lr),
            OptimizerKind::Rmsprop => BlendCoefficients::pure_rmsprop(self.hyper.eta_rmsprop),
        })
    }

    fn epoch_permutation(seed: u64, train_count: usize, epoch_index: u64) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..train_count).collect();
        Rng::new(seed)
            .substream(STREAM_SHUFFLE)
            .substream(epoch_index)
            .shuffle(&mut perm);
        perm
    }

    fn refresh_epoch_permutation(&mut self) {
        let epoch_index = self.iteration / self.iterations_per_epoch as u64;
        if self.perm_for_epoch == Some(epoch_index) {
            return;
        }
        self.epoch_perm =
            Self::epoch_permutation(self.cfg.seed, self.dataset.train_count(), epoch_index);
        self.perm_for_epoch = Some(epoch_index);
    }

    /// The global batch for the current iteration, in worker order: worker w
    /// takes the `b_local` slice starting at `w * b_local`.
    fn global_batch_indices(&self) -> Vec<usize> {
        let b_total = self.cfg.b_total();
        let within = (self.iteration % self.iterations_per_epoch as u64) as usize;
        let start = within * b_total;
        (0..b_total)
            .map(|j| self.epoch_perm[(start + j) % self.epoch_perm.len()])
            .collect()
    }

    /// Example indices any given iteration will draw, independent of trainer
    /// state. Worker w's share is the `b_local` slice at `w * b_local`.
    pub fn batch_indices_for(&self, iteration: u64) -> Vec<usize> {
        let epoch_index = iteration / self.iterations_per_epoch as u64;
        let perm =
            Self::epoch_permutation(self.cfg.seed, self.dataset.train_count(), epoch_index);
        let b_total = self.cfg.b_total();
        let start = (iteration % self.iterations_per_epoch as u64) as usize * b_total;
        (0..b_total).map(|j| perm[(start + j) % perm.len()]).collect()
    }

    /// One synchronous data-parallel step: local forward/backward on every
    /// worker, gradient all-reduce, a single optimizer step, and broadcast.
    pub fn train_step(&mut self) -> Result<()> {
        let epoch = self.fractional_epoch();
        let blend = self.blend_for(epoch)?;
        self.refresh_epoch_permutation();

        // replica consistency is a precondition of the collective step
        for r in &self.replicas[1..] {
            if let Some(param) = self.replicas[0].model.param_difference(&r.model) {
                return Err(Error::ReplicaDivergence { param, worker: r.worker_id });
            }
        }

        let batch_indices = self.global_batch_indices();
        let b_local = self.cfg.b_local;
        let worker_batches: Vec<(Tensor, Vec<usize>)> = (0..self.cfg.workers)
            .map(|w| self.dataset.gather(&batch_indices[w * b_local..(w + 1) * b_local]))
            .collect();

        let iteration = self.iteration;
        let outcomes: Vec<Result<(f64, ParamMap)>> = self
            .replicas
            .par_iter_mut()
            .zip(worker_batches.par_iter())
            .map(|(replica, (x, labels))| replica.model.forward_backward(x, labels))
            .collect();
        let mut worker_losses = Vec::with_capacity(self.cfg.workers);
        let mut worker_grads = Vec::with_capacity(self.cfg.workers);
        for (worker, outcome) in outcomes.into_iter().enumerate() {
            match outcome {
                Ok((loss, grads)) => {
                    worker_losses.push(loss);
                    worker_grads.push(grads);
                }
                Err(e) => {
                    return Err(Error::DivergedLoss {
                        iteration,
                        context: format!("worker {worker}: {e}"),
                    })
                }
            }
        }
        let train_loss = worker_losses.iter().sum::<f64>() / worker_losses.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::DivergedLoss {
                iteration,
                context: "mean of worker losses".into(),
            });
        }

        // gradient averaging across workers, then one update broadcast back
        let params = self.replicas[0].model.param_map();
        let mut new_params = ParamMap::new();
        for (name, current) in &params {
            let payloads: Vec<Tensor> = worker_grads
                .iter()
                .map(|g| {
                    g.get(name).cloned().ok_or_else(|| {
                        Error::Config(format!("worker gradient missing {name}"))
                    })
                })
                .collect::<Result<_>>()?;
            let reduced = all_reduce(&payloads, ReduceOp::Average, self.cfg.comm_precision)?;
            self.saturated_values += reduced.saturated_values;
            let mut grad = reduced.tensor;
            if self.cfg.weight_decay != 0.0 && name.ends_with(".weight") {
                grad = grad.add(&current.scale(self.cfg.weight_decay))?;
            }
            let state = self.opt_states.get_mut(name).expect("state per parameter");
            let (updated, new_state) = step(current, &grad, state, &blend, &self.hyper)?;
            *state = new_state;
            new_params.insert(name.clone(), updated);
        }
        for replica in &mut self.replicas {
            replica.model.apply_params(&new_params)?;
        }

        let payload_bytes = self.gradient_payload_bytes();
        self.log.push_iteration(IterationRecord {
            iteration: self.iteration,
            epoch,
            lr: blend.lr,
            alpha_sgd: blend.alpha_sgd,
            train_loss,
            comm_seconds_model: collective::ring_time(
                payload_bytes,
                self.cfg.workers,
                &self.cost_model,
            ),
        });
        self.iteration += 1;
        Ok(())
    }

    /// Gradient bytes one worker puts on the wire per iteration.
    pub fn gradient_payload_bytes(&self) -> u64 {
        let per_element = match self.cfg.comm_precision {
            CommPrecision::Full64 => 8,
            CommPrecision::Half16 => 2,
        };
        (self.replicas[0].model.param_elements() * per_element) as u64
    }

    /// Synchronize batch-norm statistics across workers, then evaluate the
    /// validation split. Identical on every worker; repeated calls without
    /// training in between return identical results.
    pub fn validate(&mut self) -> Result<(f64, f64)> {
        let hidden = self.replicas[0].model.spec().hidden_count();
        for layer in 0..hidden {
            if self.replicas[0].model.bn_layer(layer).is_none() {
                continue;
            }
            let mut states: Vec<&mut BnLayerState> = self
                .replicas
                .iter_mut()
                .map(|r| {
                    r.model
                        .bn_layer_mut(layer)
                        .expect("same architecture on every replica")
                })
                .collect();
            self.saturated_values += sync_statistics(
                &mut states,
                self.cfg.comm_precision,
                self.cfg.variance_combine,
            )?;
        }

        let val = self.dataset.val_indices();
        let total = val.len();
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let indices: Vec<usize> = val.collect();
        for chunk in indices.chunks(VALIDATION_BATCH) {
            let (x, labels) = self.dataset.gather(chunk);
            let (l, c) = self.replicas[0].model.evaluate(&x, &labels)?;
            loss_sum += l;
            correct += c;
        }
        Ok((loss_sum / total as f64, correct as f64 / total as f64))
    }

    /// Current state as a checkpoint document.
    pub fn checkpoint(&self) -> Checkpoint {
        let model = &self.replicas[0].model;
        let mut ck = Checkpoint {
            config_echo: self.cfg.echo(),
            iteration: self.iteration,
            params: model.param_map(),
            ..Checkpoint::default()
        };
        for (name, state) in &self.opt_states {
            ck.opt_sq_grad.insert(name.clone(), state.sq_grad_avg.clone());
            ck.opt_velocity.insert(name.clone(), state.velocity.clone());
        }
        for layer in 0..model.spec().hidden_count() {
            if let Some(bn) = model.bn_layer(layer) {
                if let Some(stats) = bn.synced_stats() {
                    ck.bn_synced
                        .insert(format!("layer{layer}"), (stats.mean.clone(), stats.var.clone()));
                }
            }
        }
        ck
    }

    /// Run the full loop: `epochs x iterations_per_epoch` steps with a
    /// validation pass after each epoch. Writes the run log CSVs and a final
    /// checkpoint into `out_dir`; on error the partial log is still flushed.
    pub fn run(&mut self) -> Result<RunSummary> {
        let out_dir = self.cfg.out_dir.clone();
        let mut final_val_accuracy = None;
        let outcome = (|| -> Result<()> {
            for epoch in 0..self.cfg.epochs {
                for _ in 0..self.iterations_per_epoch {
                    self.train_step()?;
                }
                let (val_loss, val_accuracy) = self.validate()?;
                self.log.push_epoch(EpochRecord { epoch, val_loss, val_accuracy });
                final_val_accuracy = Some(val_accuracy);
            }
            Ok(())
        })();

        // flush whatever we have, even on failure
        self.log.write_csv_files(&out_dir)?;
        outcome?;
        self.checkpoint().write(&out_dir.join(CHECKPOINT_FILE))?;

        Ok(RunSummary {
            log: self.log.clone(),
            final_val_accuracy,
            out_dir,
            saturated_values: self.saturated_values,
        })
    }
}

/// Build and run a trainer for `cfg`.
pub fn run(cfg: RunConfig) -> Result<RunSummary> {
    Trainer::new(cfg)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScheduleKind;

    fn tiny_config() -> RunConfig {
        RunConfig {
            seed: 42,
            workers: 2,
            b_local: 4,
            epochs: 4,
            iterations_per_epoch: Some(5),
            model_layers: vec![6, 10, 3],
            model_batchnorm: true,
            synthetic_examples: 400,
            synthetic_separation: 3.0,
            out_dir: std::env::temp_dir().join("largebatch-trainer-test"),
            ..RunConfig::default()
        }
    }

    #[test]
    fn replicas_stay_bit_identical() {
        let mut t = Trainer::new(tiny_config()).unwrap();
        for _ in 0..10 {
            t.train_step().unwrap();
            for r in &t.replicas()[1..] {
                assert_eq!(
                    t.replicas()[0].model.param_difference(&r.model),
                    None,
                    "replica {} diverged",
                    r.worker_id
                );
            }
        }
    }

    #[test]
    fn fractional_epoch_is_exact() {
        let mut t = Trainer::new(tiny_config()).unwrap();
        for i in 0..7u64 {
            assert_eq!(t.fractional_epoch(), i as f64 / 5.0);
            t.train_step().unwrap();
        }
    }

    #[test]
    fn single_worker_step_matches_hand_rolled_loop() {
        // W=1 training must equal a plain non-distributed loop bit for bit.
        let cfg = RunConfig {
            workers: 1,
            b_local: 8,
            model_batchnorm: false,
            comm_precision: CommPrecision::Full64,
            ..tiny_config()
        };
        let mut t = Trainer::new(cfg.clone()).unwrap();

        // independent loop sharing only the constructors
        let base = Rng::new(cfg.seed);
        let spec = ModelSpec::new(cfg.model_layers.clone(), false, cfg.init_scale).unwrap();
        let data = dataset::make_synthetic(
            &mut base.substream(STREAM_DATASET),
            spec.classes(),
            cfg.synthetic_examples,
            spec.input_dim(),
            cfg.synthetic_separation,
        )
        .unwrap();
        let mut model = Mlp::init(spec, &mut base.substream(STREAM_INIT));
        let mut states: BTreeMap<String, OptimizerState> = model
            .param_map()
            .iter()
            .map(|(n, p)| (n.clone(), OptimizerState::zeros(p.shape())))
            .collect();
        let schedule = cfg.lr_schedule().unwrap();
        let hyper = cfg.hyper();

        for it in 0..10u64 {
            t.train_step().unwrap();

            let epoch = it as f64 / 5.0;
            let epoch_index = it / 5;
            let mut perm: Vec<usize> = (0..data.train_count()).collect();
            Rng::new(cfg.seed)
                .substream(STREAM_SHUFFLE)
                .substream(epoch_index)
                .shuffle(&mut perm);
            let start = (it % 5) as usize * 8;
            let idx: Vec<usize> = (0..8).map(|j| perm[(start + j) % perm.len()]).collect();
            let (x, labels) = data.gather(&idx);
            let (_, grads) = model.forward_backward(&x, &labels).unwrap();
            let blend = blend_at(epoch, schedule.lr_at(epoch).unwrap(), &hyper).unwrap();
            let params = model.param_map();
            let mut updated = ParamMap::new();
            for (name, p) in &params {
                let mut g = grads[name].clone();
                if name.ends_with(".weight") {
                    g = g.add(&p.scale(cfg.weight_decay)).unwrap();
                }
                let st = states.get_mut(name).unwrap();
                let (np, ns) = step(p, &g, st, &blend, &hyper).unwrap();
                *st = ns;
                updated.insert(name.clone(), np);
            }
            model.apply_params(&updated).unwrap();
        }

        let ours = t.params();
        let reference = model.param_map();
        assert_eq!(ours, reference, "W=1 trainer deviates from plain loop");
    }

    #[test]
    fn validate_is_pure_and_repeatable() {
        let mut t = Trainer::new(tiny_config()).unwrap();
        for _ in 0..5 {
            t.train_step().unwrap();
        }
        let a = t.validate().unwrap();
        let b = t.validate().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn every_worker_sees_the_same_validation_result() {
        let mut t = Trainer::new(tiny_config()).unwrap();
        for _ in 0..5 {
            t.train_step().unwrap();
        }
        t.validate().unwrap();
        let (x, labels) = {
            let d = t.dataset();
            let idx: Vec<usize> = d.val_indices().collect();
            d.gather(&idx)
        };
        let results: Vec<(f64, usize)> = t
            .replicas()
            .iter()
            .map(|r| r.model.evaluate(&x, &labels).unwrap())
            .collect();
        for r in &results[1..] {
            assert_eq!(r, &results[0], "worker validation results differ");
        }
    }

    #[test]
    fn indistinguishable_classes_train_to_chance_level() {
        let out = std::env::temp_dir().join("largebatch-sep0");
        let _ = std::fs::remove_dir_all(&out);
        let cfg = RunConfig {
            seed: 3,
            workers: 2,
            b_local: 8,
            epochs: 4,
            iterations_per_epoch: Some(20),
            model_layers: vec![6, 16, 4],
            synthetic_examples: 4000,
            synthetic_separation: 0.0,
            out_dir: out.clone(),
            ..RunConfig::default()
        };
        let summary = run(cfg).unwrap();
        let acc = summary.final_val_accuracy.unwrap();
        assert!(
            acc <= 0.25 + 0.05,
            "zero-separation classes are unlearnable, got accuracy {acc}"
        );
        let _ = std::fs::remove_dir_all(&out);
    }

    #[test]
    fn validate_before_any_training_fails_with_bn() {
        let mut t = Trainer::new(tiny_config()).unwrap();
        assert!(matches!(
            t.validate(),
            Err(Error::UnpopulatedStats { .. })
        ));
    }

    #[test]
    fn zero_epoch_run_writes_init_checkpoint() {
        let out = std::env::temp_dir().join("largebatch-zero-epoch");
        let _ = std::fs::remove_dir_all(&out);
        let cfg = RunConfig { epochs: 0, out_dir: out.clone(), ..tiny_config() };
        let before = Trainer::new(cfg.clone()).unwrap().params();
        let summary = run(cfg).unwrap();
        assert!(summary.log.iterations.is_empty());
        assert!(summary.log.epochs.is_empty());
        assert_eq!(summary.final_val_accuracy, None);
        let ck = Checkpoint::load(&out.join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ck.iteration, 0);
        assert_eq!(ck.params, before);
        let _ = std::fs::remove_dir_all(&out);
    }

    #[test]
    fn identical_seed_and_config_reproduce_logs_bit_for_bit() {
        let out_a = std::env::temp_dir().join("largebatch-repro-a");
        let out_b = std::env::temp_dir().join("largebatch-repro-b");
        for d in [&out_a, &out_b] {
            let _ = std::fs::remove_dir_all(d);
        }
        let cfg = tiny_config();
        let a = run(RunConfig { out_dir: out_a.clone(), ..cfg.clone() }).unwrap();
        let b = run(RunConfig { out_dir: out_b.clone(), ..cfg }).unwrap();
        assert_eq!(a.log.iteration_csv(), b.log.iteration_csv());
        assert_eq!(a.log.epoch_csv(), b.log.epoch_csv());
        let ck_a = std::fs::read_to_string(out_a.join(CHECKPOINT_FILE)).unwrap();
        let ck_b = std::fs::read_to_string(out_b.join(CHECKPOINT_FILE)).unwrap();
        // config echoes differ only in out_dir
        assert_eq!(
            ck_a.replace(&out_a.display().to_string(), ""),
            ck_b.replace(&out_b.display().to_string(), "")
        );
        for d in [&out_a, &out_b] {
            let _ = std::fs::remove_dir_all(d);
        }
    }

    #[test]
    fn goyal_schedule_is_selectable() {
        let cfg = RunConfig { schedule: ScheduleKind::Goyal, ..tiny_config() };
        let t = Trainer::new(cfg).unwrap();
        let b = t.blend_for(0.0).unwrap();
        // goyal starts at the full base rate
        assert_eq!(b.lr, t.config().eta_base().unwrap());
    }

    #[test]
    fn shards_partition_each_global_batch() {
        let mut t = Trainer::new(tiny_config()).unwrap();
        t.refresh_epoch_permutation();
        let indices = t.global_batch_indices();
        let unique: std::collections::BTreeSet<usize> = indices.iter().copied().collect();
        assert_eq!(unique.len(), indices.len(), "workers saw overlapping samples");
        assert!(indices.iter().all(|&i| i < t.dataset().train_count()));
    }
}
