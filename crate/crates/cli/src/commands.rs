use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use privcap_core::captioner::train::{eval_pairs, smooth, trajectory_gap, training_pairs};
use privcap_core::captioner::{data, tan_equivalence_run, train as train_model, Captioner};
use privcap_core::eval::{evaluate, write_report};
use privcap_core::nn::{checkpoint, mean_loss, Model, Precision};
use privcap_core::planner::{self, DeltaRule, TrainPlan};
use privcap_core::{Accountant, MechanismParams};
use serde::Serialize;

use crate::config::{RunConfig, SCHEMA_VERSION};
use crate::{AccountArgs, CliError, ConfigArgs, EvalArgs, ExportArgs, PlanCommand, PlanOutput, RunArgs};

const MANIFEST: &str = "manifest.json";
const METRICS: &str = "metrics.csv";
const CHECKPOINT: &str = "model.ckpt";
const RESOLVED_CONFIG: &str = "config.toml";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// A buffered writer on `path`, or standard output for `-`.
fn open_output(path: &Path) -> Result<Box<dyn Write>, CliError> {
    if path == Path::new("-") {
        return Ok(Box::new(std::io::stdout().lock()));
    }
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    Ok(Box::new(BufWriter::new(f)))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Four significant digits, switching to scientific notation outside
/// `[1e-4, 1e6)`.
fn sig4(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if (-4..6).contains(&mag) {
        format!("{x:.*}", (3 - mag).max(0) as usize)
    } else {
        format!("{x:.3e}")
    }
}

fn resolve(args: &ConfigArgs, base: Option<toml::Table>) -> Result<RunConfig, CliError> {
    let mut table = base.unwrap_or_default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let file: toml::Table = text.parse().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for (section, value) in file {
            match (table.get_mut(&section).and_then(|v| v.as_table_mut()), value) {
                (Some(existing), toml::Value::Table(t)) => existing.extend(t),
                (_, v) => {
                    table.insert(section, v);
                }
            }
        }
    }
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("dp.seed={seed}"));
    }
    if let Some(t) = args.threads {
        overrides.push(format!("run.threads={t}"));
    }
    if let Some(c) = args.conversion {
        overrides.push(format!("accountant.conversion=\"{c}\""));
    }
    for o in &overrides {
        crate::config::apply_override(&mut table, o)?;
    }
    RunConfig::from_table(table)
}

pub fn account(a: &AccountArgs) -> Result<(), CliError> {
    let q = match (a.q, a.batch, a.dataset_size) {
        (Some(q), None, _) => q,
        (None, Some(b), Some(n)) => b / n,
        _ => {
            return Err(CliError::Config(
                "give either --q or both --batch and --dataset-size".into(),
            ))
        }
    };
    let delta = match (a.delta, a.dataset_size) {
        (Some(d), _) => d,
        (None, Some(n)) => privcap_core::accountant::default_delta(n)?,
        (None, None) => return Err(CliError::Config("give --delta or --dataset-size (for delta = 1/N)".into())),
    };
    let mut acct = Accountant::with_conversion(a.conversion);
    if let Some(bad) = a.extra_alphas.iter().find(|&&x| !(x > 1.0 && x.is_finite())) {
        return Err(CliError::Config(format!("Renyi orders must exceed 1, got {bad}")));
    }
    acct.alpha_grid.extend(&a.extra_alphas);
    acct.alpha_grid.sort_by(f64::total_cmp);
    acct.alpha_grid.dedup();
    let params = MechanismParams::new(a.sigma, q, a.steps, delta)?;
    let r = acct.epsilon(&params)?;
    if a.json {
        let out = serde_json::json!({
            "epsilon": r.spec.epsilon,
            "delta": delta,
            "best_alpha": r.best_alpha,
            "sigma": a.sigma,
            "q": q,
            "steps": a.steps,
            "conversion": a.conversion.to_string(),
        });
        println!("{out}");
    } else {
        println!(
            "epsilon = {} at alpha = {} (delta = {}, q = {}, steps = {}, {} conversion)",
            sig4(r.spec.epsilon),
            r.best_alpha,
            sig4(delta),
            sig4(q),
            a.steps,
            a.conversion
        );
    }
    Ok(())
}

fn log_sweep(from: f64, to: f64, points: usize) -> Result<Vec<f64>, CliError> {
    if !(from > 0.0 && to >= from && points >= 1) {
        return Err(CliError::Config(format!(
            "sweep needs 0 < --from <= --to and --points >= 1, got {from}, {to}, {points}"
        )));
    }
    if points == 1 {
        return Ok(vec![from]);
    }
    let (a, b) = (from.ln(), to.ln());
    Ok((0..points)
        .map(|i| (a + (b - a) * i as f64 / (points - 1) as f64).exp().round())
        .collect())
}

fn write_rows<R: Serialize>(out: &PlanOutput, rows: &[R]) -> Result<(), CliError> {
    let w = open_output(&out.output)?;
    planner::write_csv(w, rows).map_err(|e| io_err(&out.output, e))
}

pub fn plan(p: &PlanCommand) -> Result<(), CliError> {
    match p {
        PlanCommand::EpsVsN(a) => {
            let sizes = if a.sizes.is_empty() { log_sweep(a.from, a.to, a.points)? } else { a.sizes.clone() };
            let rule = a.delta.map_or(DeltaRule::InverseN, DeltaRule::Fixed);
            let acct = Accountant::with_conversion(a.out.conversion);
            let rows = planner::eps_vs_dataset_size(&acct, a.batch, a.sigma, a.steps, &sizes, rule)?;
            write_rows(&a.out, &rows)
        }
        PlanCommand::EpochsVsBatch(a) => {
            let batches = if a.batches.is_empty() {
                log_sweep(a.from, a.to.min(a.dataset_size), a.points)?
            } else {
                a.batches.clone()
            };
            let delta = match a.delta {
                Some(d) => d,
                None => privcap_core::accountant::default_delta(a.dataset_size)?,
            };
            let acct = Accountant::with_conversion(a.out.conversion);
            let rows = planner::epochs_vs_batch(&acct, a.eps, a.sigma, a.dataset_size, &batches, delta)?;
            write_rows(&a.out, &rows)
        }
        PlanCommand::Tan(a) => {
            let plan = TrainPlan::new(a.dataset_size, a.batch, a.sigma, a.steps, a.delta)?;
            let scaled = planner::tan_scale(&plan, a.k)?;
            write_rows(&a.out, &scaled.rows())
        }
    }
}

/// Metadata stored in every checkpoint header.
fn checkpoint_meta(cfg: &RunConfig, step: u64) -> Result<serde_json::Value, CliError> {
    Ok(serde_json::json!({
        "schema": SCHEMA_VERSION,
        "step": step,
        "config": cfg.to_toml(),
    }))
}

fn config_json(cfg: &RunConfig) -> Result<serde_json::Value, CliError> {
    serde_json::to_value(cfg).map_err(|e| CliError::Config(e.to_string()))
}

pub fn train(r: &RunArgs) -> Result<(), CliError> {
    let cfg = resolve(&r.config, None)?;
    prepare_dir(&r.out_dir)?;
    let tc = cfg.train_config();
    write_file(&r.out_dir.join(RESOLVED_CONFIG), &cfg.to_toml())?;

    let manifest_path = r.out_dir.join(MANIFEST);
    let resolved = config_json(&cfg)?;
    let acct = cfg.accountant.clone();
    let dp = if tc.private {
        tc.dp.clone()
    } else {
        privcap_core::dpsgd::DpSgdConfig { sigma: 0.0, ..tc.dp.clone() }
    };
    privcap_core::dpsgd::RunManifest::new(&dp, tc.delta, &acct, resolved.clone())?.write(&manifest_path)?;

    let metrics_path = r.out_dir.join(METRICS);
    let f = File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
    let mut metrics = csv::Writer::from_writer(BufWriter::new(f));
    let mut write_err = None;
    let data = training_pairs(&tc);
    let outcome = train_model(&tc, &data, &acct, |report, _| {
        if write_err.is_none() {
            if let Err(e) = metrics.serialize(report) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(&metrics_path, e));
    }
    metrics.flush().map_err(|e| io_err(&metrics_path, e))?;

    let mut manifest = outcome.manifest;
    manifest.config = resolved;
    manifest.write(&manifest_path)?;
    checkpoint::save(
        &r.out_dir.join(CHECKPOINT),
        outcome.model.params(),
        checkpoint_meta(&cfg, manifest.steps_done)?,
    )?;
    let held_out = if cfg.run.eval_size == 0 {
        String::new()
    } else {
        format!(": held-out loss {:.4} -> {:.4}", outcome.initial_eval_loss, outcome.final_eval_loss)
    };
    match manifest.epsilon {
        Some(eps) => println!(
            "trained {} steps{held_out}, epsilon = {} (delta = {})",
            manifest.steps_done,
            sig4(eps),
            sig4(manifest.delta)
        ),
        None => println!("trained {} steps without privacy{held_out}", manifest.steps_done),
    }
    println!("wrote {}", r.out_dir.display());
    Ok(())
}

/// Loads a checkpoint written by `train` together with its configuration.
fn load_checkpoint(path: &Path, args: &ConfigArgs) -> Result<(Captioner, RunConfig), CliError> {
    let meta = checkpoint::read_meta(path)?;
    let base: toml::Table = meta
        .get("config")
        .and_then(|c| c.as_str())
        .ok_or_else(|| CliError::Io(format!("{}: checkpoint has no configuration", path.display())))?
        .parse()
        .map_err(|e| io_err(path, e))?;
    let cfg = resolve(args, Some(base))?;
    let mut model = Captioner::new(cfg.model, cfg.dp.seed)?;
    checkpoint::load_into(path, model.params_mut())?;
    Ok((model, cfg))
}

pub fn eval(e: &EvalArgs) -> Result<(), CliError> {
    let (model, cfg) = load_checkpoint(&e.checkpoint, &e.config)?;
    prepare_dir(&e.out_dir)?;
    let held_out = eval_pairs(&cfg.train_config());
    if !held_out.is_empty() {
        println!("held-out caption loss {:.4}", mean_loss(&model, &held_out, Precision::Double)?);
    }
    let rows = evaluate(&model, &cfg.data, &cfg.eval_options())?;
    let path = e.out_dir.join("eval.csv");
    let f = File::create(&path).map_err(|err| io_err(&path, err))?;
    write_report(BufWriter::new(f), &rows)?;
    for r in &rows {
        println!("{:<14} k={:<3} accuracy {:.4} on {}", r.task, r.k, r.accuracy, r.n_eval);
    }
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct TanStep {
    step: u64,
    reference_loss: f64,
    scaled_loss: f64,
    reference_smoothed: f64,
    scaled_smoothed: f64,
}

pub fn simulate_tan(r: &RunArgs) -> Result<(), CliError> {
    let cfg = resolve(&r.config, None)?;
    prepare_dir(&r.out_dir)?;
    write_file(&r.out_dir.join(RESOLVED_CONFIG), &cfg.to_toml())?;
    let tc = cfg.train_config();
    let data = training_pairs(&tc);
    let run = tan_equivalence_run(&tc, &data, cfg.tan.k, &cfg.accountant)?;

    let plan_path = r.out_dir.join("tan_plan.csv");
    planner::write_csv(open_output(&plan_path)?, &run.plan.rows()).map_err(|e| io_err(&plan_path, e))?;

    let (a, b) = (run.reference_losses(), run.scaled_losses());
    let (sa, sb) = (smooth(&a, cfg.tan.window), smooth(&b, cfg.tan.window));
    let rows: Vec<TanStep> = (0..a.len())
        .map(|i| TanStep {
            step: run.reference[i].step,
            reference_loss: a[i],
            scaled_loss: b[i],
            reference_smoothed: sa[i],
            scaled_smoothed: sb[i],
        })
        .collect();
    let path = r.out_dir.join("tan.csv");
    planner::write_csv(open_output(&path)?, &rows).map_err(|e| io_err(&path, e))?;
    println!(
        "reference (B={}, sigma={}) vs scaled (B={}, sigma={}): smoothed loss gap {:.4} over {} steps",
        run.plan.reference.batch_size,
        sig4(run.plan.reference.sigma),
        run.plan.scaled.batch_size,
        sig4(run.plan.scaled.sigma),
        trajectory_gap(&a, &b, cfg.tan.window),
        a.len()
    );
    println!("wrote {}", r.out_dir.display());
    Ok(())
}

pub fn export_data(e: &ExportArgs) -> Result<(), CliError> {
    let cfg = resolve(&e.config, None)?;
    let n = e.count.unwrap_or(cfg.dp.dataset_size as usize);
    let pairs = cfg.data.generate(n).into_iter().map(|s| s.pair);
    let mut w = open_output(&e.output)?;
    data::export(&mut w, pairs).map_err(|err| io_err(&e.output, err))?;
    w.flush().map_err(|err| io_err(&e.output, err))
}

pub fn show_config(c: &ConfigArgs) -> Result<(), CliError> {
    print!("{}", resolve(c, None)?.to_toml());
    Ok(())
}
