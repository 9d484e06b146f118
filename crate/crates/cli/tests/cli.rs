use std::f64::consts::PI;
use std::path::Path;
use std::process::{Command, Output};

use fttnn::corenet::CoreNetwork;
use fttnn::fttmodel::FttModel;
use fttnn::problems::builtin;
use fttnn_cli::commands::{export_slice, SliceRequest};

fn fttnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fttnn")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

/// `scale · Π sin(freq x_i)` as a rank-1 model without boundary factors.
fn product_of_sines(d: usize, freq: f64, scale: f64) -> FttModel<f64> {
    let cores = (0..d)
        .map(|i| {
            let mut c = CoreNetwork::zeros(1, 1, 1, None).unwrap();
            c.w1[0] = freq;
            c.w2[0] = if i == 0 { scale } else { 1.0 };
            c
        })
        .collect();
    FttModel::from_cores(cores).unwrap()
}

#[test]
fn list_problems_shows_table_settings() {
    let o = fttnn(&["list-problems"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.lines().any(|l| l == "schrodinger-d10 (r=5, h=25)"), "{out}");
    assert!(out.lines().any(|l| l == "poisson-d3 (r=2, h=50)"));
}

#[test]
fn validate_echoes_quadrature_and_names_bad_fields() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), "good.toml", "problem = \"poisson-d3\"\n");
    let o = fttnn(&["validate", &good]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("30 subintervals × 30 points"), "{}", stdout(&o));

    let bad = write_config(dir.path(), "bad.toml", "problem = \"poisson-d3\"\n[model]\nrank = 0\n");
    let o = fttnn(&["validate", &bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ranks"), "{}", stderr(&o));

    let o = fttnn(&["validate", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = fttnn(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_epoch_run_reports_initial_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &format!(
            "problem = \"helmholtz-d3\"\noutput = {:?}\n[schedule]\nadam_epochs = 0\nlbfgs_epochs = 0\n[quadrature]\nn_sub = 6\nn_pts = 8\n",
            out.to_str().unwrap()
        ),
    );
    let o = fttnn(&["run", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["epochs"], 0);
    assert_eq!(summary["status"], "ok");
    for key in ["final_loss", "rel_error", "wall_time_s", "config", "git_describe", "schema_version"] {
        assert!(!summary[key].is_null(), "{key} missing");
    }
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.trim(), "epoch,phase,loss,rel_error,wall_ms");
    assert!(out.join("model.ckpt").exists());
}

#[test]
fn short_run_checkpoint_slice_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &format!(
            "problem = \"poisson-d3\"\noutput = {:?}\n[model]\nhidden = 8\n[quadrature]\nn_sub = 4\nn_pts = 6\n[schedule]\nadam_epochs = 20\nlbfgs_epochs = 5\nlog_every = 5\n[eval]\nkind = \"grid\"\nn = 11\n",
            out.to_str().unwrap()
        ),
    );
    let o = fttnn(&["run", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "epoch,phase,loss,rel_error,wall_ms");
    assert_eq!(rows.len(), 26);
    assert!(rows[1].starts_with("1,adam,"));
    assert!(rows[25].starts_with("25,lbfgs,"));
    assert!(!rows[25].split(',').nth(3).unwrap().is_empty());

    let ckpt = out.join("model.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let o = fttnn(&["export-slice", ckpt, "--problem", "poisson-d3", "--free", "0,1", "--fix", "2=0.5", "--resolution", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 1 + 4);

    // Values written by the CLI equal an in-process grid evaluation.
    let o = fttnn(&["export-slice", ckpt, "--problem", "poisson-d3", "--free", "0,2", "--fix", "1=-0.3", "--resolution", "7"]);
    let model = FttModel::<f64>::load(ckpt).unwrap();
    let axis: Vec<f64> = (0..7).map(|i| -1.0 + 2.0 * i as f64 / 6.0).collect();
    let grid = model.eval_grid(&[axis.clone(), vec![-0.3], axis]).unwrap();
    for (line, want) in stdout(&o).lines().skip(1).zip(&grid) {
        let u: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!((u - want).abs() <= 1e-12);
    }

    let o = fttnn(&["eval-checkpoint", ckpt, "--problem", "poisson-d3", "--eval", "grid:11"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(report["rel_error"].as_f64().unwrap() > 0.0);
    assert_eq!(report["boundary_loss"].as_f64().unwrap(), 0.0);

    let o = fttnn(&["export-slice", ckpt, "--problem", "poisson-d3", "--free", "0,1", "--fix", "2=3.0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = fttnn(&["export-slice", ckpt, "--problem", "helmholtz-k3pi", "--free", "0,0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exact_model_slice_has_tiny_diff() {
    let spec = builtin("helmholtz-d3").unwrap();
    let model = product_of_sines(3, 2.0 * PI, 1.0);
    let req = SliceRequest { problem: spec.name.clone(), free: [0, 1], fixed: vec![(2, 0.5 / 2.0)], resolution: 21 };
    let csv = export_slice(&model, &spec, &req).unwrap();
    for line in csv.lines().skip(1) {
        let diff: f64 = line.split(',').nth(4).unwrap().parse().unwrap();
        assert!(diff.abs() <= 1e-6);
    }
}

#[test]
fn high_wave_number_slice_oscillates() {
    let k = 15.0 * PI;
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("k15.ckpt");
    product_of_sines(3, k, 1.0 / (k * k)).save(&ckpt).unwrap();
    let o = fttnn(&[
        "export-slice",
        ckpt.to_str().unwrap(),
        "--problem",
        "helmholtz-k15pi",
        "--free",
        "0,1",
        "--fix",
        "2=0.5",
        "--resolution",
        "201",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    // Walk along x₁ at x₂ = 0.5 (column index 100 of the 201-point grid).
    let values: Vec<f64> = stdout(&o)
        .lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
            ((f[1] - 0.5).abs() < 1e-12).then_some(f[2])
        })
        .filter(|u| u.abs() > 1e-12)
        .collect();
    let changes = values.windows(2).filter(|w| w[0].signum() != w[1].signum()).count();
    assert!((changes as i64 - 15).abs() <= 1, "{changes} sign changes");
}

#[test]
fn divergent_training_exits_with_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &format!(
            "problem = \"poisson-d3\"\noutput = {:?}\n[model]\nhidden = 4\n[quadrature]\nn_sub = 2\nn_pts = 4\n[schedule]\nadam_epochs = 50\nadam_lr = 1e200\nlbfgs_epochs = 0\n",
            out.to_str().unwrap()
        ),
    );
    let o = fttnn(&["run", &cfg]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "failed");
    assert!(out.join("metrics.csv").exists());
    assert!(out.join("model.ckpt").exists());
}

#[test]
fn thread_count_from_environment() {
    let o = Command::new(env!("CARGO_BIN_EXE_fttnn")).arg("list-problems").env("FTTNN_THREADS", "0").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_fttnn")).arg("list-problems").env("FTTNN_THREADS", "2").output().unwrap();
    assert!(o.status.success());
}

#[test]
fn baseline_methods_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pinn");
    let cfg = write_config(
        dir.path(),
        "p.toml",
        &format!(
            "problem = \"poisson-d3\"\nmethod = \"pinn\"\noutput = {:?}\n[baseline]\nhidden = 6\nsamples = 100\n[schedule]\nadam_epochs = 5\nlbfgs_epochs = 2\n[eval]\nkind = \"grid\"\nn = 6\n",
            out.to_str().unwrap()
        ),
    );
    let o = fttnn(&["run", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("baseline.json").exists());

    let out = dir.path().join("als");
    let cfg = write_config(
        dir.path(),
        "a.toml",
        &format!(
            "problem = \"singular-approx-d4\"\nmethod = \"tt-als\"\noutput = {:?}\n[baseline]\ngrid = 6\nsweeps = 2\n",
            out.to_str().unwrap()
        ),
    );
    let o = fttnn(&["run", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().contains(",als,"));
}
