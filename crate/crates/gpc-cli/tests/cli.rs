//! End-to-end tests of the `gpc` binary: every subcommand is exercised
//! through its real process boundary, checking outputs, stdout summaries,
//! and exit codes (0 success, 1 check failure, 2 config error, 3 I/O).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf-8 stdout")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("utf-8 stderr")
}

fn write_json(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).expect("serializable")).expect("writable");
    p
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

/// Small single-level model section shared by the training tests.
fn small_model(epochs: usize, seed: u64) -> Value {
    json!({
        "levels": 1, "orders": 1, "widths": [1], "replicas": 1,
        "stride_candidates": [[1]],
        "rate_mu": 0.2, "rate_theta": 0.05, "rate_pi": 0.0,
        "settle_iterations": 3, "epochs": epochs, "seed": seed
    })
}

fn sine(length: usize) -> Value {
    json!({ "kind": "sine", "period": 10.0, "phase": 0.5, "length": length })
}

#[test]
fn generate_writes_the_requested_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "gen.json", &json!({ "sequence": sine(100) }));
    let out_dir = dir.path().join("out");
    let out = run(&[
        "generate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--svg",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let csv = read(&out_dir.join("sequence.csv"));
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 100);
    for row in rows {
        row.parse::<f64>().expect("every row is one number");
    }
    assert!(read(&out_dir.join("sequence.svg")).starts_with("<svg"));
    assert!(stdout(&out).contains("100 samples"));
}

#[test]
fn generate_rejects_a_bad_period_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut seq = sine(10);
    seq["period"] = json!(0.0);
    let cfg = write_json(dir.path(), "gen.json", &json!({ "sequence": seq }));
    let out = run(&["generate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("period"), "stderr: {}", stderr(&out));
}

#[test]
fn generate_with_equal_seeds_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut seq = sine(64);
    seq["noise_std"] = json!(0.3);
    seq["seed"] = json!(5);
    let cfg = write_json(dir.path(), "gen.json", &json!({ "sequence": seq }));
    for out_name in ["a", "b"] {
        let out_dir = dir.path().join(out_name);
        let out = run(&[
            "generate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0);
    }
    assert_eq!(
        read(&dir.path().join("a/sequence.csv")),
        read(&dir.path().join("b/sequence.csv"))
    );
}

#[test]
fn unknown_config_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(
        dir.path(),
        "gen.json",
        &json!({ "sequence": sine(10), "surprise": 1 }),
    );
    let out = run(&["generate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("surprise"));
}

#[test]
fn train_writes_consistent_metrics_and_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(
        dir.path(),
        "train.json",
        &json!({ "sequence": sine(80), "model": small_model(2, 9) }),
    );
    let out_dir = dir.path().join("out");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("normalized_mse="));

    let metrics = read(&out_dir.join("metrics.csv"));
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,level,order,channel,stride,error_norm,xi_norm,energy,total_free_energy"
    );

    // The step's reported total must be exactly the sum of its channel rows.
    let mut by_step: std::collections::BTreeMap<usize, (f64, f64)> = Default::default();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 9, "row: {line}");
        let step: usize = fields[0].parse().unwrap();
        let energy: f64 = fields[7].parse().unwrap();
        let total: f64 = fields[8].parse().unwrap();
        let entry = by_step.entry(step).or_insert((0.0, total));
        entry.0 += energy;
        assert_eq!(entry.1, total, "total changed within step {step}");
    }
    assert!(!by_step.is_empty());
    for (step, (sum, total)) in by_step {
        assert!(
            (sum - total).abs() <= 1e-9,
            "step {step}: channel sum {sum} vs total {total}"
        );
    }

    let ckpt = read(&out_dir.join("checkpoint.json"));
    gpc_core::Model::from_checkpoint_str(&ckpt).expect("checkpoint loads");
}

#[test]
fn train_with_zero_epochs_keeps_the_freshly_built_model() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(0, 42);
    let cfg = write_json(
        dir.path(),
        "train.json",
        &json!({ "sequence": sine(30), "model": model.clone() }),
    );
    let out_dir = dir.path().join("out");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let parsed: gpc_core::ModelConfig = serde_json::from_value(model).unwrap();
    let fresh = gpc_core::Model::build(parsed)
        .unwrap()
        .checkpoint_string()
        .unwrap();
    assert_eq!(read(&out_dir.join("checkpoint.json")), fresh);

    let metrics = read(&out_dir.join("metrics.csv"));
    assert_eq!(metrics.lines().count(), 1, "header only");
}

#[test]
fn train_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut seq = sine(60);
    seq["noise_std"] = json!(0.05);
    seq["seed"] = json!(3);
    let cfg = write_json(
        dir.path(),
        "train.json",
        &json!({ "sequence": seq, "model": small_model(2, 4) }),
    );
    for out_name in ["a", "b"] {
        let out_dir = dir.path().join(out_name);
        let out = run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0);
    }
    assert_eq!(
        read(&dir.path().join("a/metrics.csv")),
        read(&dir.path().join("b/metrics.csv"))
    );
    assert_eq!(
        read(&dir.path().join("a/checkpoint.json")),
        read(&dir.path().join("b/checkpoint.json"))
    );
}

#[test]
fn train_without_a_model_section_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "train.json", &json!({ "sequence": sine(10) }));
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("model"));
}

/// Train on a constant signal until the one-step error underflows, then the
/// closed-loop rollout must reproduce the constant exactly.
#[test]
fn eval_of_a_constant_signal_model_reports_zero_mse() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("constant.csv");
    std::fs::write(&data, "0.8\n".repeat(300)).unwrap();
    let csv_seq = json!({
        "kind": "csv", "path": data.to_str().unwrap(), "length": 300, "dimension": 1
    });

    let mut model = small_model(20, 1);
    model["orders"] = json!(0);
    model["rate_theta"] = json!(0.5);
    let train_cfg = write_json(
        dir.path(),
        "train.json",
        &json!({ "sequence": csv_seq.clone(), "model": model }),
    );
    let out_dir = dir.path().join("out");
    let out = run(&[
        "train",
        "--config",
        train_cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let eval_cfg = write_json(
        dir.path(),
        "eval.json",
        &json!({
            "checkpoint": out_dir.join("checkpoint.json").to_str().unwrap(),
            "sequence": csv_seq,
            "horizon": 25
        }),
    );
    let mut rollouts = Vec::new();
    for out_name in ["e1", "e2"] {
        let eval_dir = dir.path().join(out_name);
        let out = run(&[
            "eval",
            "--config",
            eval_cfg.to_str().unwrap(),
            "--out",
            eval_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
        let line = stdout(&out);
        let mse: f64 = line
            .trim()
            .strip_prefix("mse=")
            .expect("mse line")
            .parse()
            .unwrap();
        assert!(mse < 1e-12, "rollout mse {mse}");
        rollouts.push(read(&eval_dir.join("rollout.csv")));
    }
    assert_eq!(rollouts[0], rollouts[1], "eval reruns differ");
    assert_eq!(
        rollouts[0].lines().count(),
        26,
        "header plus one row per step"
    );
    assert!(rollouts[0].starts_with("step,channel,predicted,actual\n"));
}

#[test]
fn eval_with_zero_horizon_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(
        dir.path(),
        "eval.json",
        &json!({ "checkpoint": "whatever.json", "sequence": sine(10), "horizon": 0 }),
    );
    let out = run(&["eval", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("horizon"));
}

#[test]
fn eval_with_an_unreadable_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(
        dir.path(),
        "eval.json",
        &json!({
            "checkpoint": dir.path().join("missing.json").to_str().unwrap(),
            "sequence": sine(10),
            "horizon": 5
        }),
    );
    let out = run(&["eval", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
}

#[test]
fn sweep_writes_one_row_per_stride() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = small_model(3, 2);
    model["orders"] = json!(2);
    let cfg = write_json(
        dir.path(),
        "sweep.json",
        &json!({ "sequence": sine(50), "model": model, "strides": [1, 2] }),
    );
    let out_dir = dir.path().join("out");
    let out = run(&[
        "stride-sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let csv = read(&out_dir.join("sweep.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "stride,mean_abs_e_d,mean_abs_e_h,order2_state_variance"
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,"));
    assert!(lines[2].starts_with("2,"));
    for line in &lines[1..] {
        for field in line.split(',').skip(1) {
            let v: f64 = field.parse().unwrap();
            assert!(v.is_finite() && v >= 0.0, "field {field} in {line}");
        }
    }
}

#[test]
fn sweep_rejects_an_empty_stride_list() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = small_model(1, 2);
    model["orders"] = json!(2);
    let cfg = write_json(
        dir.path(),
        "sweep.json",
        &json!({ "sequence": sine(20), "model": model, "strides": [] }),
    );
    let out = run(&["stride-sweep", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("strides"));
}

/// With the goal set to the model's own action-free rollout, the all-zero
/// policy scores exactly zero and must be the marked argmin.
#[test]
fn plan_marks_the_null_policy_when_the_goal_is_its_own_rollout() {
    let dir = tempfile::tempdir().unwrap();
    let train_cfg = write_json(
        dir.path(),
        "train.json",
        &json!({ "sequence": sine(60), "model": small_model(1, 6) }),
    );
    let out_dir = dir.path().join("out");
    let out = run(&[
        "train",
        "--config",
        train_cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let ckpt_path = out_dir.join("checkpoint.json");
    let model = gpc_core::Model::load_checkpoint(&ckpt_path).unwrap();
    let goal: Vec<Vec<f64>> = model
        .predict_rollout(2)
        .unwrap()
        .iter()
        .map(|p| p.data().to_vec())
        .collect();

    let plan_cfg = write_json(
        dir.path(),
        "plan.json",
        &json!({
            "checkpoint": ckpt_path.to_str().unwrap(),
            "actions": [[0.0], [0.25]],
            "lengths": [2],
            "horizons": [2],
            "goal": goal
        }),
    );
    let mut tables = Vec::new();
    for out_name in ["p1", "p2"] {
        let plan_dir = dir.path().join(out_name);
        let out = run(&[
            "plan",
            "--config",
            plan_cfg.to_str().unwrap(),
            "--out",
            plan_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
        assert_eq!(stdout(&out).trim(), "selected=0");
        tables.push(read(&plan_dir.join("policies.csv")));
    }
    assert_eq!(tables[0], tables[1], "plan reruns differ");

    let lines: Vec<&str> = tables[0].lines().collect();
    assert_eq!(lines[0], "policy,length,horizon,actions,efe,selected");
    assert_eq!(lines.len(), 1 + 4, "two actions, length two");
    assert_eq!(lines[1], "0,2,2,0|0,0,1", "null policy row");
    for line in &lines[2..] {
        assert!(
            line.ends_with(",0"),
            "only the null policy is selected: {line}"
        );
    }
}

#[test]
fn plan_rejects_an_empty_action_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(
        dir.path(),
        "plan.json",
        &json!({ "checkpoint": "whatever.json", "actions": [], "goal": [[0.0]] }),
    );
    let out = run(&["plan", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("action"));
}

#[test]
fn plan_names_the_field_when_action_or_goal_widths_are_wrong() {
    let dir = tempfile::tempdir().unwrap();
    let train_cfg = write_json(
        dir.path(),
        "train.json",
        &json!({ "sequence": sine(60), "model": small_model(1, 6) }),
    );
    let out_dir = dir.path().join("out");
    let out = run(&[
        "train",
        "--config",
        train_cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let ckpt = out_dir.join("checkpoint.json");

    // The model is scalar, so two-wide actions cannot be applied.
    let bad_actions = write_json(
        dir.path(),
        "bad_actions.json",
        &json!({
            "checkpoint": ckpt.to_str().unwrap(),
            "actions": [[0.0, 0.0]],
            "goal": [[0.0]]
        }),
    );
    let out = run(&["plan", "--config", bad_actions.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("actions") && err.contains("width"), "{err}");

    // Goals are compared against predicted observations, which are scalar.
    let bad_goal = write_json(
        dir.path(),
        "bad_goal.json",
        &json!({
            "checkpoint": ckpt.to_str().unwrap(),
            "actions": [[0.0]],
            "goal": [[0.0, 0.0]]
        }),
    );
    let out = run(&["plan", "--config", bad_goal.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("goal") && err.contains("width"), "{err}");
}

#[test]
fn gradcheck_passes_and_reports_every_case() {
    let out = run(&["gradcheck"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let case_lines = text.lines().filter(|l| l.starts_with("pass ")).count();
    assert!(case_lines >= 150, "only {case_lines} case lines");
    assert!(text.lines().last().unwrap().contains("0 failures"));
}

#[test]
fn gradcheck_detects_a_corrupted_gradient() {
    let out = run(&["gradcheck", "--corrupt"]);
    assert_eq!(code(&out), 1);
    let text = stdout(&out);
    assert!(
        text.lines().any(|l| l.starts_with("FAIL ")),
        "stdout: {text}"
    );
}
