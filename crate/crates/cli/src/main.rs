//! `largebatch` command-line interface.
//!
//! Subcommands drive training runs, dump schedule curves, simulate
//! all-reduce error and cost, fit the communication cost model, and convert
//! run logs into plot-ready CSV. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or config failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use largebatch::collective::{
    all_reduce, fit_cost_model, ring_time, CommPrecision, CostModel, ReduceOp,
};
use largebatch::config::RunConfig;
use largebatch::rng::Rng;
use largebatch::runlog;
use largebatch::trainer::Trainer;

#[derive(Parser)]
#[command(
    name = "largebatch",
    version,
    about = "Simulate data-parallel large-minibatch training: RMSprop warm-up, \
             slow-start LR scaling, synchronized batch norm, half-precision ring all-reduce"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training experiment described by a config file
    Train {
        /// Path to a key=value config file
        #[arg(long)]
        config: PathBuf,
        /// Overrides applied after the file parses, e.g. workers=4 or
        /// comm.precision=full64
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print epoch,lr,alpha_sgd,alpha_rmsprop CSV for the configured run
    ScheduleDump {
        #[arg(long)]
        config: PathBuf,
        /// Epoch grid spacing
        #[arg(long, default_value_t = 0.5)]
        grid_step: f64,
    },
    /// Measure half-precision all-reduce error against the exact result and
    /// print the modeled ring time
    SimulateAllreduce {
        #[arg(long)]
        workers: usize,
        #[arg(long)]
        elements: usize,
        /// full64 or half16
        #[arg(long, default_value = "half16")]
        precision: String,
        #[arg(long, default_value_t = 12345)]
        seed: u64,
    },
    /// Least-squares fit of the ring cost model to measured (workers,
    /// seconds) pairs
    FitCostmodel {
        /// CSV file with `workers,seconds` rows (header optional)
        #[arg(long)]
        measurements: PathBuf,
        /// Gradient payload in bytes assumed for the bandwidth term
        #[arg(long, default_value_t = 4_194_304)]
        payload_bytes: u64,
    },
    /// Summarize a run directory's logs into one plot-ready per-epoch CSV
    LogSummary {
        /// Directory containing train_log.csv and epoch_log.csv
        #[arg(long)]
        run_dir: PathBuf,
    },
}

/// Failure paths keyed to their exit code.
enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

fn main() -> ExitCode {
    // CSV output is meant to be piped; die quietly on a closed pipe instead
    // of panicking.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { config, overrides } => cmd_train(&config, &overrides),
        Command::ScheduleDump { config, grid_step } => cmd_schedule_dump(&config, grid_step),
        Command::SimulateAllreduce { workers, elements, precision, seed } => {
            cmd_simulate_allreduce(workers, elements, &precision, seed)
        }
        Command::FitCostmodel { measurements, payload_bytes } => {
            cmd_fit_costmodel(&measurements, payload_bytes)
        }
        Command::LogSummary { run_dir } => cmd_log_summary(&run_dir),
    }
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path).map_err(|e| CliError::Config(e.to_string()))?;
    for pair in overrides {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {pair:?} is not KEY=VALUE")))?;
        cfg.apply_override(key.trim(), value.trim())
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn cmd_train(config: &Path, overrides: &[String]) -> Result<(), CliError> {
    let cfg = load_config(config, overrides)?;
    let out_dir = cfg.out_dir.clone();
    let summary = largebatch::trainer::run(cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "run complete: {} iterations, {} epochs, logs in {}",
        summary.log.iterations.len(),
        summary.log.epochs.len(),
        out_dir.display()
    );
    if let Some(acc) = summary.final_val_accuracy {
        println!("final validation accuracy: {acc}");
    }
    if summary.saturated_values > 0 {
        eprintln!(
            "warning: {} values saturated on the half-precision wire",
            summary.saturated_values
        );
    }
    Ok(())
}

fn cmd_schedule_dump(config: &Path, grid_step: f64) -> Result<(), CliError> {
    if grid_step.is_nan() || grid_step <= 0.0 {
        return Err(CliError::Config(format!("grid_step must be positive, got {grid_step}")));
    }
    let cfg = load_config(config, &[])?;
    if cfg.epochs == 0 {
        return Err(CliError::Config("cannot dump a schedule for a zero-epoch run".into()));
    }
    let trainer = Trainer::new(cfg.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    println!("epoch,lr,alpha_sgd,alpha_rmsprop");
    let mut i = 0u64;
    loop {
        let epoch = i as f64 * grid_step;
        if epoch >= cfg.epochs as f64 {
            break;
        }
        let blend = trainer
            .blend_for(epoch)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("{epoch},{},{},{}", blend.lr, blend.alpha_sgd, blend.alpha_rmsprop);
        i += 1;
    }
    Ok(())
}

fn cmd_simulate_allreduce(
    workers: usize,
    elements: usize,
    precision: &str,
    seed: u64,
) -> Result<(), CliError> {
    if workers == 0 || elements == 0 {
        return Err(CliError::Config("workers and elements must be >= 1".into()));
    }
    let precision: CommPrecision = precision
        .parse()
        .map_err(|e: largebatch::Error| CliError::Config(e.to_string()))?;

    let rng = Rng::new(seed);
    let payloads: Vec<_> = (0..workers)
        .map(|w| rng.substream(w as u64).normal_tensor(&[elements], 0.0, 1.0))
        .collect();
    let exact = all_reduce(&payloads, ReduceOp::Sum, CommPrecision::Full64)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let probed = all_reduce(&payloads, ReduceOp::Sum, precision)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let num: f64 = probed
        .tensor
        .data()
        .iter()
        .zip(exact.tensor.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den: f64 = exact.tensor.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let rel_l2_error = if den == 0.0 { 0.0 } else { num / den };

    let bytes_per_element = match precision {
        CommPrecision::Full64 => 8,
        CommPrecision::Half16 => 2,
    };
    let seconds = ring_time(
        (elements * bytes_per_element) as u64,
        workers,
        &CostModel::default(),
    );

    println!("workers,elements,precision,rel_l2_error,ring_seconds_model");
    println!("{workers},{elements},{precision},{rel_l2_error},{seconds}");
    Ok(())
}

fn cmd_fit_costmodel(measurements: &Path, payload_bytes: u64) -> Result<(), CliError> {
    let text = std::fs::read_to_string(measurements).map_err(|e| {
        CliError::Config(format!("cannot read {}: {e}", measurements.display()))
    })?;
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (w, s) = line
            .split_once(',')
            .ok_or_else(|| CliError::Config(format!("line {}: expected workers,seconds", lineno + 1)))?;
        if lineno == 0 && w.trim().parse::<usize>().is_err() {
            continue; // header row
        }
        let workers: usize = w
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("line {}: bad worker count {w:?}", lineno + 1)))?;
        let seconds: f64 = s
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("line {}: bad seconds {s:?}", lineno + 1)))?;
        pairs.push((workers, seconds));
    }

    let fit = fit_cost_model(&pairs, payload_bytes).map_err(|e| match e {
        largebatch::Error::UnderdeterminedFit { .. } => CliError::Config(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    })?;

    println!("alpha_latency={}", fit.model.alpha_latency);
    println!("beta_bandwidth={}", fit.model.beta_bandwidth);
    println!("gamma_compute={}", fit.model.gamma_compute);
    println!("workers,seconds,fitted,residual");
    for (&(workers, seconds), residual) in pairs.iter().zip(&fit.residuals) {
        let fitted = fit.model.gamma_compute + ring_time(payload_bytes, workers, &fit.model);
        println!("{workers},{seconds},{fitted},{residual}");
    }
    Ok(())
}

fn cmd_log_summary(run_dir: &Path) -> Result<(), CliError> {
    let read = |name: &str| -> Result<String, CliError> {
        std::fs::read_to_string(run_dir.join(name))
            .map_err(|e| CliError::Config(format!("cannot read {name} in {}: {e}", run_dir.display())))
    };
    let train = read(runlog::ITERATION_LOG_FILE)?;
    let epochs = read(runlog::EPOCH_LOG_FILE)?;

    let mut train_lines = train.lines();
    if train_lines.next() != Some(runlog::ITERATION_HEADER) {
        return Err(CliError::Config(format!(
            "{} has an unexpected header",
            runlog::ITERATION_LOG_FILE
        )));
    }
    // per-epoch aggregates over iteration records
    struct Acc {
        count: usize,
        loss_sum: f64,
        alpha_sum: f64,
        comm_sum: f64,
        last_lr: f64,
    }
    let mut per_epoch: Vec<Acc> = Vec::new();
    for line in train_lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(CliError::Config(format!("malformed train log row {line:?}")));
        }
        let epoch: f64 = parse_field(f[1])?;
        let lr: f64 = parse_field(f[2])?;
        let alpha: f64 = parse_field(f[3])?;
        let loss: f64 = parse_field(f[4])?;
        let comm: f64 = parse_field(f[5])?;
        let idx = epoch.floor() as usize;
        while per_epoch.len() <= idx {
            per_epoch.push(Acc { count: 0, loss_sum: 0.0, alpha_sum: 0.0, comm_sum: 0.0, last_lr: 0.0 });
        }
        let acc = &mut per_epoch[idx];
        acc.count += 1;
        acc.loss_sum += loss;
        acc.alpha_sum += alpha;
        acc.comm_sum += comm;
        acc.last_lr = lr;
    }

    let mut epoch_lines = epochs.lines();
    if epoch_lines.next() != Some(runlog::EPOCH_HEADER) {
        return Err(CliError::Config(format!(
            "{} has an unexpected header",
            runlog::EPOCH_LOG_FILE
        )));
    }
    let mut val_rows = Vec::new();
    for line in epoch_lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(CliError::Config(format!("malformed epoch log row {line:?}")));
        }
        val_rows.push((parse_field::<f64>(f[1])?, parse_field::<f64>(f[2])?));
    }

    println!("epoch,iterations,mean_train_loss,mean_alpha_sgd,last_lr,comm_seconds_total,val_loss,val_accuracy");
    for (epoch, acc) in per_epoch.iter().enumerate() {
        let (val_loss, val_acc) = val_rows
            .get(epoch)
            .map(|&(l, a)| (l.to_string(), a.to_string()))
            .unwrap_or_else(|| ("".into(), "".into()));
        println!(
            "{epoch},{},{},{},{},{},{val_loss},{val_acc}",
            acc.count,
            acc.loss_sum / acc.count.max(1) as f64,
            acc.alpha_sum / acc.count.max(1) as f64,
            acc.last_lr,
            acc.comm_sum
        );
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(s: &str) -> Result<T, CliError> {
    s.parse()
        .map_err(|_| CliError::Config(format!("cannot parse field {s:?}")))
}
