//! The six `gpc` subcommands. Each reads one JSON run config, works through
//! gpc-core, writes CSV (plus an optional SVG) into the output directory,
//! and prints a one-line summary to stdout.

use std::fmt::Write as _;
use std::process::ExitCode;

use gpc_core::autodiff::Tensor;
use gpc_core::dynamics::Stride;
use gpc_core::error::invalid_config;
use gpc_core::gradcheck::run_suite;
use gpc_core::layer::{ChannelKind, Precision};
use gpc_core::planner::{enumerate_policies, select_policy, Action, Preference};
use gpc_core::signal::{save_csv, Sequence};
use gpc_core::{GpcError, Model, ModelConfig, Result, Trace};

use crate::config;
use crate::output::{ensure_dir, float, line_svg, write_file};
use crate::{GradcheckArgs, RunArgs};

pub fn generate(args: &RunArgs) -> Result<()> {
    let cfg = config::load(&args.config)?;
    let seq_cfg = config::require(cfg.sequence, "sequence", "generate")?;
    let seq = seq_cfg.build()?;
    ensure_dir(&args.out)?;
    let path = args.out.join("sequence.csv");
    save_csv(&seq, &path)?;
    if args.svg {
        let series: Vec<(String, Vec<f64>)> = (0..seq.dim())
            .map(|c| {
                let values = seq.samples().iter().map(|s| s.data()[c]).collect();
                (format!("ch{c}"), values)
            })
            .collect();
        write_file(
            &args.out.join("sequence.svg"),
            &line_svg("sequence", &series),
        )?;
    }
    println!(
        "wrote {} ({} samples, dim {})",
        path.display(),
        seq.len(),
        seq.dim()
    );
    Ok(())
}

pub fn train(args: &RunArgs) -> Result<()> {
    let cfg = config::load(&args.config)?;
    let seq_cfg = config::require(cfg.sequence, "sequence", "train")?;
    let model_cfg = config::require(cfg.model, "model", "train")?;
    let seq = seq_cfg.build()?;
    let mut model = Model::build(model_cfg)?;
    let trace = model.train(&seq)?;
    ensure_dir(&args.out)?;
    model.save_checkpoint(args.out.join("checkpoint.json"))?;
    write_file(&args.out.join("metrics.csv"), &metrics_csv(&trace))?;
    if args.svg {
        let totals: Vec<f64> = trace.steps.iter().map(|s| s.total_free_energy).collect();
        write_file(
            &args.out.join("metrics.svg"),
            &line_svg("total free energy", &[("total_free_energy".into(), totals)]),
        )?;
    }
    println!("normalized_mse={}", float(normalized_mse(&trace, &seq)));
    Ok(())
}

const METRICS_HEADER: &str =
    "step,level,order,channel,stride,error_norm,xi_norm,energy,total_free_energy";

/// One row per error channel per step; the step's total repeats on each of
/// its rows so any row slice still carries the energy trajectory.
fn metrics_csv(trace: &Trace) -> String {
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    for step in &trace.steps {
        for ch in &step.channels {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{}",
                step.step,
                ch.level,
                ch.order,
                ch.channel,
                ch.stride,
                float(ch.error_norm),
                float(ch.xi_norm),
                float(ch.energy),
                float(step.total_free_energy),
            );
        }
    }
    csv
}

/// Mean squared one-step prediction error per channel over the last (up to)
/// 200 steps, divided by the sequence variance. The error read is the best
/// data-level replica's order-0 transition error, which is exactly the
/// observation minus its one-step prediction because the data level is
/// clamped. A zero-variance sequence falls back to the raw MSE.
fn normalized_mse(trace: &Trace, seq: &Sequence) -> f64 {
    let dim = seq.dim() as f64;
    let from = trace.steps.len().saturating_sub(200);
    let mut sum = 0.0;
    let mut n = 0usize;
    for step in &trace.steps[from..] {
        let Some(best_stride) = step.levels.first().map(|l| l.stride) else {
            continue;
        };
        for ch in &step.channels {
            if ch.level == 0
                && ch.order == 0
                && ch.channel == ChannelKind::Transition
                && ch.stride == best_stride
            {
                sum += ch.error_norm * ch.error_norm / dim;
                n += 1;
            }
        }
    }
    if n == 0 {
        return f64::NAN;
    }
    let mse = sum / n as f64;
    let var = seq.variance();
    if var > 0.0 {
        mse / var
    } else {
        mse
    }
}

pub fn eval(args: &RunArgs) -> Result<()> {
    let cfg = config::load(&args.config)?;
    let ckpt = config::require(cfg.checkpoint, "checkpoint", "eval")?;
    let seq_cfg = config::require(cfg.sequence, "sequence", "eval")?;
    let horizon = config::require(cfg.horizon, "horizon", "eval")?;
    if horizon == 0 {
        return Err(invalid_config("horizon", "must be at least 1"));
    }
    let model = Model::load_checkpoint(&ckpt)?;
    let seq = seq_cfg.build()?;
    if seq.dim() != model.config().widths[0] {
        return Err(invalid_config(
            "sequence",
            "dimension does not match the checkpoint's data level",
        ));
    }
    if seq.len() < horizon {
        return Err(invalid_config(
            "horizon",
            "longer than the provided continuation",
        ));
    }

    let preds = model.predict_rollout(horizon)?;
    let mut csv = String::from("step,channel,predicted,actual\n");
    let mut se = 0.0;
    for (i, pred) in preds.iter().enumerate() {
        let actual = seq.sample(i);
        for c in 0..seq.dim() {
            let (p, a) = (pred.data()[c], actual.data()[c]);
            se += (p - a) * (p - a);
            let _ = writeln!(csv, "{},{},{},{}", i + 1, c, float(p), float(a));
        }
    }
    let mse = se / (horizon as f64 * seq.dim() as f64);

    ensure_dir(&args.out)?;
    write_file(&args.out.join("rollout.csv"), &csv)?;
    if args.svg {
        let predicted: Vec<f64> = preds.iter().map(|p| p.data()[0]).collect();
        let actual: Vec<f64> = seq.samples()[..horizon]
            .iter()
            .map(|s| s.data()[0])
            .collect();
        write_file(
            &args.out.join("rollout.svg"),
            &line_svg(
                "rollout vs continuation",
                &[("predicted".into(), predicted), ("actual".into(), actual)],
            ),
        )?;
    }
    println!("mse={}", float(mse));
    Ok(())
}

pub fn stride_sweep(args: &RunArgs) -> Result<()> {
    let cfg = config::load(&args.config)?;
    let seq_cfg = config::require(cfg.sequence, "sequence", "stride-sweep")?;
    let base = config::require(cfg.model, "model", "stride-sweep")?;
    let strides = config::require(cfg.strides, "strides", "stride-sweep")?;
    if strides.is_empty() {
        return Err(invalid_config("strides", "must list at least one stride"));
    }
    if base.orders < 2 {
        return Err(invalid_config(
            "orders",
            "the sweep reports order-2 state variance; set orders to at least 2",
        ));
    }
    if base.epochs == 0 {
        return Err(invalid_config(
            "epochs",
            "the sweep needs at least one pass",
        ));
    }
    let seq = seq_cfg.build()?;

    let mut csv = String::from("stride,mean_abs_e_d,mean_abs_e_h,order2_state_variance\n");
    let mut e_d_col = Vec::with_capacity(strides.len());
    let mut e_h_col = Vec::with_capacity(strides.len());
    let mut var_col = Vec::with_capacity(strides.len());
    for &stride in &strides {
        let row = sweep_one(&base, &seq, stride)?;
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            stride,
            float(row.e_d),
            float(row.e_h),
            float(row.var2),
        );
        e_d_col.push(row.e_d);
        e_h_col.push(row.e_h);
        var_col.push(row.var2);
    }

    ensure_dir(&args.out)?;
    write_file(&args.out.join("sweep.csv"), &csv)?;
    if args.svg {
        write_file(
            &args.out.join("sweep.svg"),
            &line_svg(
                "stride sweep",
                &[
                    ("mean_abs_e_d".into(), e_d_col),
                    ("mean_abs_e_h".into(), e_h_col),
                    ("order2_state_variance".into(), var_col),
                ],
            ),
        )?;
    }
    println!("swept {} strides", strides.len());
    Ok(())
}

struct SweepRow {
    e_d: f64,
    e_h: f64,
    var2: f64,
}

/// Train one single-replica model pinned to `stride` on the whole sequence
/// and report converged data-level errors: per-entry dynamical (order-0
/// transition) and top-down error magnitudes, plus the variance of the
/// order-2 state over its sampling instants. "Converged" means the most
/// recent half of the recorded values.
fn sweep_one(base: &ModelConfig, seq: &Sequence, stride: usize) -> Result<SweepRow> {
    let mut mc = base.clone();
    mc.replicas = 1;
    mc.stride_candidates = vec![vec![stride]; mc.levels];
    mc.stride_weights = None;
    let mut model = Model::build(mc)?;

    let scale = (seq.dim() as f64).sqrt();
    let mut e_d = Vec::new();
    let mut e_h = Vec::new();
    let mut snaps: Vec<Tensor> = Vec::new();
    for _ in 0..base.epochs {
        for i in 0..seq.len() {
            let report = model.step(seq.sample(i))?;
            let mut fired = false;
            for ch in &report.channels {
                if ch.level == 0 && ch.order == 0 {
                    match ch.channel {
                        ChannelKind::Transition => {
                            e_d.push(ch.error_norm / scale);
                            fired = true;
                        }
                        ChannelKind::Hierarchical => e_h.push(ch.error_norm / scale),
                        ChannelKind::Derivative => {}
                    }
                }
            }
            if fired {
                snaps.push(model.best_replica(0)?.state().order(2).mu().detached());
            }
        }
    }

    Ok(SweepRow {
        e_d: tail_mean(&e_d),
        e_h: tail_mean(&e_h),
        var2: tail_variance(&snaps),
    })
}

fn tail_mean(values: &[f64]) -> f64 {
    let tail = &values[values.len() / 2..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Mean per-coordinate population variance over the most recent half of the
/// snapshots; the same normalization as [`Sequence::variance`].
fn tail_variance(snaps: &[Tensor]) -> f64 {
    let tail = &snaps[snaps.len() / 2..];
    if tail.is_empty() {
        return f64::NAN;
    }
    let d = tail[0].data().len();
    let n = tail.len() as f64;
    let mut var_sum = 0.0;
    for c in 0..d {
        let mean: f64 = tail.iter().map(|s| s.data()[c]).sum::<f64>() / n;
        var_sum += tail
            .iter()
            .map(|s| (s.data()[c] - mean).powi(2))
            .sum::<f64>()
            / n;
    }
    var_sum / d as f64
}

pub fn plan(args: &RunArgs) -> Result<()> {
    let cfg = config::load(&args.config)?;
    let ckpt = config::require(cfg.checkpoint, "checkpoint", "plan")?;
    let action_rows = config::require(cfg.actions, "actions", "plan")?;
    let goal_rows = config::require(cfg.goal, "goal", "plan")?;
    if action_rows.is_empty() {
        return Err(GpcError::EmptyActionSet);
    }
    let model = Model::load_checkpoint(&ckpt)?;

    // Rollouts apply action deltas to the deepest level's state, so actions
    // live in top-level coordinates while goals live in observation space.
    let widths = &model.config().widths;
    let top_width = *widths.last().expect("a model has at least one level");
    let obs_width = widths[0];
    if action_rows.iter().any(|v| v.len() != top_width) {
        return Err(invalid_config(
            "actions",
            format!("every action must have the top level's width ({top_width})"),
        ));
    }
    if goal_rows.iter().any(|v| v.len() != obs_width) {
        return Err(invalid_config(
            "goal",
            format!("every goal step must have the observation width ({obs_width})"),
        ));
    }

    let actions = action_rows
        .iter()
        .map(|v| Action::new(Tensor::vector(v.clone())))
        .collect::<Result<Vec<_>>>()?;
    let lengths = cfg.lengths.unwrap_or_else(|| vec![1]);
    let default_horizon = lengths.iter().copied().max().unwrap_or(1);
    let horizons = cfg
        .horizons
        .unwrap_or_else(|| vec![default_horizon])
        .into_iter()
        .map(Stride::new)
        .collect::<Result<Vec<_>>>()?;
    let goal: Vec<Tensor> = goal_rows
        .iter()
        .map(|v| Tensor::vector(v.clone()))
        .collect();
    let variance = cfg.goal_variance.unwrap_or(1.0);
    if !(variance.is_finite() && variance > 0.0) {
        return Err(invalid_config(
            "goal_variance",
            "must be positive and finite",
        ));
    }
    let d = model.config().widths[0];
    let sigma = Tensor::matrix(
        d,
        d,
        (0..d * d)
            .map(|i| if i % (d + 1) == 0 { variance } else { 0.0 })
            .collect(),
    );
    let pref = Preference::trajectory(goal, Precision::from_sigma(&sigma)?)?;

    let policies = enumerate_policies(&actions, &lengths, &horizons)?;
    let (_, scores) = select_policy(&model, &policies, &pref)?;
    let mut selected = 0;
    for (i, s) in scores.iter().enumerate() {
        if s.value < scores[selected].value {
            selected = i;
        }
    }

    let mut csv = String::from("policy,length,horizon,actions,efe,selected\n");
    for (i, (p, s)) in policies.iter().zip(&scores).enumerate() {
        let acts: Vec<String> = p
            .actions()
            .iter()
            .map(|a| {
                a.delta()
                    .data()
                    .iter()
                    .map(|v| float(*v))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            i,
            p.actions().len(),
            p.horizon().dt(),
            acts.join("|"),
            float(s.value),
            u8::from(i == selected),
        );
    }

    ensure_dir(&args.out)?;
    write_file(&args.out.join("policies.csv"), &csv)?;
    if args.svg {
        let values: Vec<f64> = scores.iter().map(|s| s.value).collect();
        write_file(
            &args.out.join("policies.svg"),
            &line_svg("policy scores", &[("efe".into(), values)]),
        )?;
    }
    println!("selected={selected}");
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<ExitCode> {
    let seed = match &args.config {
        Some(path) => config::load(path)?.seed.unwrap_or(0),
        None => 0,
    };
    let report = run_suite(seed, args.corrupt)?;
    for case in &report.cases {
        println!(
            "{} {}: {} checks, max rel err {}",
            if case.passed { "pass" } else { "FAIL" },
            case.name,
            case.checks,
            float(case.max_rel_err),
        );
    }
    let failures = report.failures().count();
    println!(
        "gradcheck: {} cases, {} failures",
        report.cases.len(),
        failures
    );
    if args.svg {
        ensure_dir(&args.out)?;
        let errs: Vec<f64> = report.cases.iter().map(|c| c.max_rel_err).collect();
        write_file(
            &args.out.join("gradcheck.svg"),
            &line_svg(
                "max relative error per case",
                &[("max_rel_err".into(), errs)],
            ),
        )?;
    }
    Ok(if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
