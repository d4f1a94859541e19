//! End-to-end tests of the `largebatch` binary: exit codes, pinned CSV
//! headers, and the documented behavior of every subcommand.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_largebatch"))
}

fn tmp(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("largebatch-cli-{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write(path: &Path, contents: &str) {
    std::fs::write(path, contents).unwrap();
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8(output.stdout.clone()).unwrap()
}

fn tiny_train_config(out_dir: &Path) -> String {
    format!(
        "seed=9\n\
         workers=2\n\
         b_local=4\n\
         epochs=4\n\
         iterations_per_epoch=5\n\
         model.layers=6,10,3\n\
         model.batchnorm=true\n\
         schedule=slow_start\n\
         optimizer=hybrid\n\
         comm.precision=half16\n\
         dataset=synthetic\n\
         out_dir={}\n",
        out_dir.display()
    )
}

#[test]
fn train_writes_logs_and_checkpoint() {
    let dir = tmp("train");
    let out_dir = dir.join("run");
    let cfg = dir.join("run.cfg");
    write(&cfg, &tiny_train_config(&out_dir));

    let output = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));

    let train_log = std::fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    assert!(train_log.starts_with("iteration,epoch,lr,alpha_sgd,train_loss,comm_seconds_model\n"));
    assert_eq!(train_log.lines().count(), 1 + 20, "4 epochs x 5 iterations");

    let epoch_log = std::fs::read_to_string(out_dir.join("epoch_log.csv")).unwrap();
    assert!(epoch_log.starts_with("epoch,val_loss,val_accuracy\n"));
    assert_eq!(epoch_log.lines().count(), 1 + 4);

    let checkpoint = std::fs::read_to_string(out_dir.join("checkpoint.txt")).unwrap();
    assert!(checkpoint.starts_with("largebatch-checkpoint v1\n"));
    assert!(checkpoint.contains("[tensor param layer0.weight]"));
    assert!(checkpoint.contains("[tensor bn_synced_mean layer0]"));
}

#[test]
fn train_worker_override_rescales_eta_base() {
    let dir = tmp("override");
    let out_dir = dir.join("run");
    let cfg = dir.join("run.cfg");
    write(&cfg, &tiny_train_config(&out_dir));

    // workers=3, b_local=32: b_total=96, eta_base=0.0375, first slow-start
    // phase at half that.
    let output = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["workers=3", "b_local=32", "model.batchnorm=false"])
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let train_log = std::fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    let first_row = train_log.lines().nth(1).unwrap();
    let lr: f64 = first_row.split(',').nth(2).unwrap().parse().unwrap();
    assert!((lr - 0.01875).abs() < 1e-15, "lr {lr} != 0.5 * 0.0375");
}

#[test]
fn out_dir_env_var_is_the_fallback() {
    let dir = tmp("env-fallback");
    let out_dir = dir.join("from-env");
    let cfg = dir.join("run.cfg");
    // same tiny config but with no out_dir key
    let text = tiny_train_config(&out_dir);
    let without_out_dir: String = text
        .lines()
        .filter(|l| !l.starts_with("out_dir="))
        .map(|l| format!("{l}\n"))
        .collect();
    write(&cfg, &without_out_dir);

    let output = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .env("LARGEBATCH_OUT_DIR", &out_dir)
        .output()
        .unwrap();
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    assert!(out_dir.join("train_log.csv").exists(), "logs not written to env out_dir");
}

#[test]
fn results_do_not_depend_on_worker_scheduling() {
    let dir = tmp("threads");
    let run_with = |threads: &str, sub: &str| -> String {
        let out_dir = dir.join(sub);
        let cfg = dir.join(format!("{sub}.cfg"));
        write(&cfg, &tiny_train_config(&out_dir));
        let output = bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .env("RAYON_NUM_THREADS", threads)
            .output()
            .unwrap();
        assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
        std::fs::read_to_string(out_dir.join("train_log.csv")).unwrap()
    };
    let sequential = run_with("1", "seq");
    let parallel = run_with("4", "par");
    assert_eq!(sequential, parallel, "worker scheduling changed logged values");
}

#[test]
fn config_errors_exit_2() {
    let dir = tmp("cfg-errors");
    let cfg = dir.join("run.cfg");
    write(&cfg, &tiny_train_config(&dir.join("run")));

    // unknown override key
    let output = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("frobnicate=1")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));

    // unknown key inside the file
    let bad = dir.join("bad.cfg");
    write(&bad, "workres=2\n");
    let output = bin().args(["train", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("workres"));

    // missing file names the path
    let missing = dir.join("nope.cfg");
    let output = bin().args(["train", "--config"]).arg(&missing).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("nope.cfg"));

    // unknown flag is a usage error
    let output = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--frobnicate")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn corrupt_dataset_fails_at_runtime_with_exit_1() {
    let dir = tmp("bad-data");
    // header says classes=3 but a label of 7 appears
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&0x4453_4554u32.to_le_bytes());
    bytes.extend_from_slice(&10u32.to_le_bytes()); // examples
    bytes.extend_from_slice(&4u32.to_le_bytes()); // input_dim
    bytes.extend_from_slice(&3u32.to_le_bytes()); // classes
    for i in 0..40 {
        bytes.extend_from_slice(&(i as f32).to_le_bytes());
    }
    for i in 0..10u16 {
        bytes.extend_from_slice(&(if i == 5 { 7u16 } else { 1 }).to_le_bytes());
    }
    let data_path = dir.join("corrupt.bin");
    std::fs::write(&data_path, bytes).unwrap();

    let cfg = dir.join("run.cfg");
    write(
        &cfg,
        &format!(
            "workers=1\nb_local=2\nepochs=4\niterations_per_epoch=2\n\
             model.layers=4,6,3\nmodel.batchnorm=false\n\
             dataset=file:{}\nout_dir={}\n",
            data_path.display(),
            dir.join("run").display()
        ),
    );
    let output = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(output.status.code(), Some(1), "corrupt data is a runtime failure");
}

#[test]
fn schedule_dump_matches_the_transition_anchors() {
    let dir = tmp("schedule");
    let cfg = dir.join("run.cfg");
    write(
        &cfg,
        "workers=8\nb_local=32\nepochs=90\nmodel.layers=6,10,3\nout_dir=unused\n",
    );

    let output = bin()
        .args(["schedule-dump", "--config"])
        .arg(&cfg)
        .args(["--grid-step", "2.5"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = stdout_of(&output);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("epoch,lr,alpha_sgd,alpha_rmsprop"));

    let mut saw_center = false;
    let mut saw_one = false;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let epoch: f64 = fields[0].parse().unwrap();
        let lr: f64 = fields[1].parse().unwrap();
        let alpha: f64 = fields[2].parse().unwrap();
        if epoch == 10.0 {
            assert!((alpha - 0.5).abs() < 1e-12, "alpha at the center: {alpha}");
            saw_center = true;
        }
        if epoch == 12.5 {
            assert_eq!(alpha, 1.0);
            saw_one = true;
        }
        if epoch >= 85.0 {
            // 0.001 * eta_base, eta_base = 0.1 at b_total 256
            assert!((lr - 0.0001).abs() < 1e-15, "tail lr {lr}");
        }
    }
    assert!(saw_center && saw_one, "grid missed the transition anchors");

    // byte-identical on repeat
    let again = bin()
        .args(["schedule-dump", "--config"])
        .arg(&cfg)
        .args(["--grid-step", "2.5"])
        .output()
        .unwrap();
    assert_eq!(output.stdout, again.stdout);
}

#[test]
fn simulate_allreduce_error_and_time_columns() {
    let output = bin()
        .args(["simulate-allreduce", "--workers", "4", "--elements", "1000", "--precision", "full64"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = stdout_of(&output);
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("workers,elements,precision,rel_l2_error,ring_seconds_model")
    );
    let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(fields[2], "full64");
    let err: f64 = fields[3].parse().unwrap();
    assert!(err <= 1e-15, "exact path error {err}");

    // a single worker never communicates
    let output = bin()
        .args(["simulate-allreduce", "--workers", "1", "--elements", "10", "--precision", "half16"])
        .output()
        .unwrap();
    let text = stdout_of(&output);
    let fields: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(fields[4].parse::<f64>().unwrap(), 0.0);

    // half precision on the wire stays within the documented bound
    let output = bin()
        .args(["simulate-allreduce", "--workers", "8", "--elements", "100000"])
        .output()
        .unwrap();
    let text = stdout_of(&output);
    let fields: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(fields[2], "half16");
    let err: f64 = fields[3].parse().unwrap();
    assert!(err > 0.0 && err <= 1e-2, "half16 error {err}");
}

#[test]
fn fit_costmodel_recovers_and_rejects_underdetermined() {
    let dir = tmp("fit");
    let (alpha, beta, gamma) = (3e-5, 5e-10, 0.08);
    let payload = 2_000_000u64;
    let mut csv = String::from("workers,seconds\n");
    for w in [1u32, 2, 4, 8, 16, 64, 256, 1024] {
        let hops = 2.0 * (f64::from(w) - 1.0);
        let t = gamma + hops * alpha + hops / f64::from(w) * payload as f64 * beta;
        csv.push_str(&format!("{w},{t}\n"));
    }
    let path = dir.join("measurements.csv");
    write(&path, &csv);

    let output = bin()
        .args(["fit-costmodel", "--measurements"])
        .arg(&path)
        .args(["--payload-bytes", "2000000"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = stdout_of(&output);
    let value = |key: &str| -> f64 {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{key}=")))
            .unwrap_or_else(|| panic!("missing {key} in output:\n{text}"))
            .parse()
            .unwrap()
    };
    assert!(((value("alpha_latency") - alpha) / alpha).abs() < 1e-6);
    assert!(((value("beta_bandwidth") - beta) / beta).abs() < 1e-6);
    assert!(((value("gamma_compute") - gamma) / gamma).abs() < 1e-6);
    assert!(text.lines().any(|l| l == "workers,seconds,fitted,residual"));

    let two_points = dir.join("two.csv");
    write(&two_points, "2,0.5\n4,0.6\n2,0.5\n");
    let output = bin()
        .args(["fit-costmodel", "--measurements"])
        .arg(&two_points)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn log_summary_emits_one_row_per_epoch() {
    let dir = tmp("summary");
    let out_dir = dir.join("run");
    let cfg = dir.join("run.cfg");
    write(&cfg, &tiny_train_config(&out_dir));
    assert!(bin().args(["train", "--config"]).arg(&cfg).output().unwrap().status.success());

    let output = bin().args(["log-summary", "--run-dir"]).arg(&out_dir).output().unwrap();
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
    let text = stdout_of(&output);
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("epoch,iterations,mean_train_loss,mean_alpha_sgd,last_lr,comm_seconds_total,val_loss,val_accuracy")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4, "one summary row per epoch");
    for (i, row) in rows.iter().enumerate() {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[0].parse::<usize>().unwrap(), i);
        assert_eq!(fields[1].parse::<usize>().unwrap(), 5);
        assert!(fields[7].parse::<f64>().unwrap() >= 0.0);
    }

    // pointing at a directory without logs is a config failure
    let output = bin().args(["log-summary", "--run-dir"]).arg(&dir).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}
