use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const SMALL: &[&str] = &[
    "--set",
    "model.dim=8",
    "--set",
    "model.heads=2",
    "--set",
    "model.enc_layers=1",
    "--set",
    "model.dec_layers=1",
    "--set",
    "model.mlp_ratio=2",
    "--set",
    "dp.dataset_size=60",
    "--set",
    "dp.batch_size=12",
    "--set",
    "dp.steps=6",
    "--set",
    "run.eval_size=10",
    "--set",
    "eval.n_eval=48",
    "--set",
    "eval.shots=2",
];

fn privcap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_privcap"))
        .args(args)
        .env_remove("PRIVCAP_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = privcap(args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    stdout(&o)
}

fn account_json(args: &[&str]) -> serde_json::Value {
    let mut a = vec!["account", "--json"];
    a.extend_from_slice(args);
    serde_json::from_str(&ok(&a)).unwrap()
}

/// Reads a CSV strictly: header required, every record the same width.
fn read_csv(path: &Path) -> (Vec<String>, Vec<csv::StringRecord>) {
    let mut r = csv::ReaderBuilder::new().flexible(false).from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().collect::<Result<Vec<_>, _>>().unwrap();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap()
}

fn train_small(dir: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--out-dir", dir.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn version_names_the_config_schema() {
    let out = ok(&["--version"]);
    assert!(out.starts_with("privcap 0.1.0"), "{out}");
    assert!(out.contains("config schema 1"), "{out}");
}

#[test]
fn account_reproduces_published_budgets() {
    for args in [
        ["--batch", "1300000", "--dataset-size", "233000000", "--sigma", "0.728", "--steps", "5708"],
        ["--batch", "98000", "--dataset-size", "233000000", "--sigma", "0.474", "--steps", "5708"],
    ] {
        let v = account_json(&args);
        let eps = v["epsilon"].as_f64().unwrap();
        assert!((eps - 8.0).abs() <= 0.4, "{args:?}: {eps}");
        assert_eq!(v["delta"].as_f64().unwrap(), 1.0 / 233e6);
    }
    let text = ok(&[
        "account", "--batch", "1300000", "--dataset-size", "233000000", "--sigma", "0.728", "--steps", "5708",
    ]);
    assert!(text.starts_with("epsilon = 8.025 "), "{text}");
}

#[test]
fn huge_noise_gives_vanishing_epsilon() {
    let base = ["--sigma", "1e9", "--q", "0.01", "--steps", "1000", "--delta", "1e-5"];
    // the default grid stops at order 256, which bounds epsilon from below
    let floor = account_json(&base)["epsilon"].as_f64().unwrap();
    assert!(floor > 0.0 && floor < 0.02, "{floor}");
    let mut extended = base.to_vec();
    extended.extend(["--extra-alphas", "1e4,1e5"]);
    let eps = account_json(&extended)["epsilon"].as_f64().unwrap();
    assert!(eps < 1e-3, "{eps}");
}

#[test]
fn inconsistent_account_flags_exit_with_config_status() {
    for args in [
        vec!["account", "--sigma", "1", "--steps", "10", "--q", "0.1"],
        vec!["account", "--sigma", "1", "--steps", "10", "--q", "0.1", "--batch", "3", "--dataset-size", "10"],
        vec!["account", "--sigma", "1", "--steps", "10", "--batch", "3"],
        vec!["account", "--sigma", "1", "--steps", "10", "--q", "2", "--delta", "1e-5"],
        vec!["account", "--sigma", "1", "--steps", "10", "--q", "0.1", "--delta", "1e-5", "--extra-alphas", "0.5"],
    ] {
        let o = privcap(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(!stderr(&o).is_empty());
    }
}

#[test]
fn eps_vs_n_contains_the_ablation_anchor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eps.csv");
    ok(&[
        "plan", "eps-vs-n", "--batch", "1300000", "--sigma", "0.728", "--steps", "5708", "--sizes",
        "1e8,233e6,1e9", "-o", path.to_str().unwrap(),
    ]);
    let (header, rows) = read_csv(&path);
    assert_eq!(header, ["dataset_size", "q", "delta", "epsilon", "best_alpha"]);
    assert_eq!(rows.len(), 3);
    let eps: Vec<f64> = rows.iter().map(|r| r[column(&header, "epsilon")].parse().unwrap()).collect();
    assert!((eps[1] - 8.0).abs() <= 0.4, "{eps:?}");
    assert!(eps[0] > eps[1] && eps[1] > eps[2]);

    // default sweep, to standard output
    let text = ok(&["plan", "eps-vs-n", "--batch", "1e4", "--sigma", "1", "--steps", "100", "--points", "5"]);
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn epochs_vs_batch_contains_the_epoch_budget() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("epochs.csv");
    ok(&[
        "plan", "epochs-vs-batch", "--eps", "8", "--sigma", "0.728", "--dataset-size", "233e6", "--batches",
        "98e3,1.3e6,4e6", "-o", path.to_str().unwrap(),
    ]);
    let (header, rows) = read_csv(&path);
    assert_eq!(header, ["batch_size", "q", "steps", "epochs", "capped"]);
    let row = rows.iter().find(|r| r[0].parse::<f64>().unwrap() == 1.3e6).unwrap();
    let epochs: f64 = row[column(&header, "epochs")].parse().unwrap();
    assert!((epochs - 32.0).abs() <= 2.0, "{epochs}");
}

#[test]
fn tan_plan_with_unit_factor_echoes_the_input() {
    let text = ok(&[
        "plan", "tan", "--dataset-size", "233e6", "--batch", "1.3e6", "--sigma", "0.728", "--steps", "5708", "--k", "1",
    ]);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "role,dataset_size,batch_size,sigma,steps,effective_noise");
    let reference: Vec<&str> = lines.next().unwrap().split(',').skip(1).collect();
    let scaled: Vec<&str> = lines.next().unwrap().split(',').skip(1).collect();
    assert_eq!(reference, scaled);

    let text = ok(&["plan", "tan", "--dataset-size", "1e5", "--batch", "1024", "--sigma", "0.5", "--steps", "10", "--k", "4"]);
    assert!(text.lines().nth(2).unwrap().starts_with("scaled,100000.0,256.0,0.125,10,"), "{text}");
}

#[test]
fn unwritable_output_exits_with_io_status() {
    let o = privcap(&[
        "plan", "tan", "--dataset-size", "1e5", "--batch", "10", "--sigma", "1", "--steps", "1", "--k", "1", "-o",
        "/nonexistent-dir/x.csv",
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[dp]\nlr = 0.001\nlearnig_rate = 2\n").unwrap();
    let o = privcap(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learnig_rate"), "{}", stderr(&o));

    let o = privcap(&["show-config", "--set", "dp.batch_size=0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = privcap(&["show-config", "--set", "bogus.key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn config_file_and_overrides_compose() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[dp]\nlr = 0.001\nsteps = 7\n\n[run]\nprivate = false\n").unwrap();
    let text = ok(&["show-config", "--config", cfg.to_str().unwrap(), "--set", "dp.steps=9", "--seed", "5"]);
    let back: toml::Table = text.parse().unwrap();
    assert_eq!(back["dp"]["lr"].as_float(), Some(0.001));
    assert_eq!(back["dp"]["steps"].as_integer(), Some(9));
    assert_eq!(back["dp"]["seed"].as_integer(), Some(5));
    assert_eq!(back["run"]["private"].as_bool(), Some(false));
    // the printed config is itself a valid config
    std::fs::write(&cfg, &text).unwrap();
    assert_eq!(ok(&["show-config", "--config", cfg.to_str().unwrap()]), text);
}

#[test]
fn repeated_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c, d) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"), dir.path().join("d"));
    train_small(&a, &["--seed", "3"]);
    train_small(&b, &["--seed", "3"]);
    train_small(&c, &["--seed", "4"]);
    train_small(&d, &["--seed", "3", "--threads", "3"]);
    let read = |p: &Path| std::fs::read(p.join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(read(&a), read(&d));
    assert_ne!(read(&a), read(&c));
    assert_eq!(std::fs::read(a.join("model.ckpt")).unwrap(), std::fs::read(b.join("model.ckpt")).unwrap());

    let (header, rows) = read_csv(&a.join("metrics.csv"));
    assert_eq!(rows.len(), 6);
    assert_eq!(
        header,
        ["step", "realized_batch", "mean_loss", "lr", "nan_count", "retries", "loss_scale"]
    );
}

#[test]
fn manifest_epsilon_round_trips_through_account() {
    let dir = tempfile::tempdir().unwrap();
    train_small(dir.path(), &["--set", "dp.sigma=0.9"]);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "finished");
    assert_eq!(m["steps_done"], 6);
    assert_eq!(m["config"]["dp"]["sigma"], 0.9);
    let arg = |k: &str| m[k].to_string();
    let v = account_json(&[
        "--sigma",
        &arg("sigma"),
        "--batch",
        &arg("batch_size"),
        "--dataset-size",
        &arg("dataset_size"),
        "--steps",
        &arg("steps"),
        "--delta",
        &arg("delta"),
    ]);
    let (a, b) = (v["epsilon"].as_f64().unwrap(), m["epsilon"].as_f64().unwrap());
    assert!(((a - b) / b).abs() <= 1e-6, "{a} vs {b}");
}

#[test]
fn corrupt_checkpoint_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    train_small(dir.path(), &[]);
    let ckpt = dir.path().join("model.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&ckpt, &bytes).unwrap();
    let o = privcap(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));
    assert!(!stderr(&o).contains("panicked"));

    let missing = dir.path().join("absent.ckpt");
    let o = privcap(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("from-env");
    let mut args = vec!["train"];
    args.extend_from_slice(SMALL);
    let o = Command::new(env!("CARGO_BIN_EXE_privcap"))
        .args(&args)
        .env("PRIVCAP_OUT_DIR", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["manifest.json", "metrics.csv", "model.ckpt", "config.toml"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn simulate_tan_writes_paired_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["simulate-tan", "--out-dir", dir.path().to_str().unwrap(), "--set", "tan.k=2"];
    args.extend_from_slice(SMALL);
    let text = ok(&args);
    assert!(text.contains("B=12") && text.contains("B=6"), "{text}");
    let (header, rows) = read_csv(&dir.path().join("tan.csv"));
    assert_eq!(
        header,
        ["step", "reference_loss", "scaled_loss", "reference_smoothed", "scaled_smoothed"]
    );
    assert_eq!(rows.len(), 6);
    let (_, plan) = read_csv(&dir.path().join("tan_plan.csv"));
    assert_eq!(plan.len(), 2);
}

#[test]
fn export_writes_one_pair_per_line() {
    let text = ok(&["export-data", "--count", "5"]);
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().all(|l| l.split('\t').count() == 2));
}

/// Full round trip on the default toy configuration (300 private steps at
/// N=2000, B=200). Measured at about 5 minutes on one core.
#[test]
fn train_then_eval_on_the_toy_spec() {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    ok(&["train", "--out-dir", dir.path().to_str().unwrap()]);
    let ckpt = dir.path().join("model.ckpt");
    let text = ok(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert!(t.elapsed() < Duration::from_secs(600), "{:?}", t.elapsed());
    assert!(text.contains("linear_probe"), "{text}");
    let (header, rows) = read_csv(&dir.path().join("eval.csv"));
    assert_eq!(header, ["task", "k", "accuracy", "n_eval", "seed"]);
    assert_eq!(rows.len(), 3);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert!(m["final_loss"].as_f64().unwrap() < (64f64).ln());
}
