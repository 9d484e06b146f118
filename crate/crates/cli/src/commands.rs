//! The subcommands. Each returns `Ok` or a [`CliError`] that knows its exit code.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fttnn::baselines::{baseline_net, drm_value_and_grad, mc_relative_error, train_mc, ttd_on_grid, AlsOptions, McSamples};
use fttnn::fttmodel::FttModel;
use fttnn::optim::{train_params, Hooks, Phase, TrainFailure, TrainLog};
use fttnn::problems::{builtin, list_problems, rayleigh, EvalSet, EvalSpec, ProblemKind, ProblemSpec};
use fttnn::Error;
use serde::Serialize;

use crate::config::{describe_quadrature, ConfigError, ExperimentConfig, Method, Resolved};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;
pub const GIT_DESCRIBE: &str = env!("FTTNN_GIT_DESCRIBE");

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
            CliError::Other(_) => EXIT_FAILURE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Other(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

/// Library errors split into the numerical ones (exit 3) and the rest.
impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NumericalFailure { .. } | Error::DegenerateModel(_) => CliError::Numerical(e.to_string()),
            Error::InvalidArgument(_) | Error::ShapeMismatch(_) | Error::UnsupportedProblem(_) | Error::UnknownProblem(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Other(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

pub fn list() -> String {
    let mut s = String::new();
    for line in list_problems() {
        s.push_str(&line);
        s.push('\n');
    }
    s
}

fn describe_eval(e: EvalSpec) -> String {
    match e {
        EvalSpec::TensorGrid { n } => format!("{n}-point grid per dimension"),
        EvalSpec::RandomUniform { n, seed } => format!("{n} uniform points (seed {seed})"),
    }
}

/// Dry-run: resolves the config and describes what `run` would do.
pub fn validate(cfg: &ExperimentConfig) -> Result<String, CliError> {
    let r = cfg.resolve()?;
    let spec = &r.spec;
    let model = spec.init_model(r.seed)?;
    let mut out = String::new();
    let kind = match spec.kind {
        ProblemKind::Elliptic => "elliptic",
        ProblemKind::Eigenvalue => "eigenvalue",
        ProblemKind::SupervisedApprox => "supervised approximation",
    };
    let boxes: Vec<String> = spec
        .domain
        .boxes
        .iter()
        .map(|b| b.iter().map(|iv| format!("({}, {})", iv.a, iv.b)).collect::<Vec<_>>().join("×"))
        .collect();
    let boundary = match &spec.boundary {
        fttnn::problems::BoundaryTreatment::Hard => "hard boundary factors".to_string(),
        fttnn::problems::BoundaryTreatment::Soft { beta, spacing, .. } => format!("soft boundary, beta {beta}, spacing {spacing}"),
    };
    let _ = writeln!(out, "problem     {} ({kind}, d={})", spec.name, spec.dim());
    let _ = writeln!(out, "domain      {}", boxes.join(" ∪ "));
    let _ = writeln!(out, "method      {}", r.method);
    let _ = writeln!(
        out,
        "model       ranks {:?}, hidden {}, {} parameters, {boundary}",
        model.ranks(),
        spec.hidden,
        model.param_count()
    );
    let _ = writeln!(out, "quadrature  {}", describe_quadrature(&spec.quad));
    let s = &r.schedule;
    let _ = writeln!(
        out,
        "schedule    {} Adam @ {}, {} L-BFGS @ {}, log every {}",
        s.adam_epochs, s.adam_lr, s.lbfgs_epochs, s.lbfgs_lr, s.log_every
    );
    match r.method {
        Method::Fttnn => {}
        Method::Pinn | Method::Drm => {
            let _ = writeln!(out, "baseline    hidden {}, {} samples", r.baseline.hidden, r.baseline.samples);
        }
        Method::TtAls => {
            let _ = writeln!(
                out,
                "baseline    {}^{} grid, {} observed, rank {}, {} sweeps",
                r.baseline.grid,
                spec.dim(),
                r.baseline.fraction,
                r.baseline.rank,
                r.baseline.sweeps
            );
        }
    }
    let _ = writeln!(out, "evaluation  {}", describe_eval(r.eval));
    let _ = writeln!(out, "seed        {}", r.seed);
    let _ = writeln!(out, "output      {}", r.output.display());
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub status: String,
    pub error: Option<String>,
    pub problem: String,
    pub method: String,
    pub seed: u64,
    pub param_count: usize,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub rel_error: Option<f64>,
    pub lambda: Option<f64>,
    pub reference_lambda: Option<f64>,
    pub fallbacks: usize,
    pub wall_time_s: f64,
    pub config: serde_json::Value,
    pub git_describe: String,
}

/// Paths of the artifacts a run writes.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }
    pub fn baseline(&self) -> PathBuf {
        self.dir.join("baseline.json")
    }
    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }
}

struct Outcome {
    log: TrainLog,
    param_count: usize,
    final_loss: Option<f64>,
    rel_error: Option<f64>,
    lambda: Option<f64>,
    failure: Option<Error>,
}

fn split(res: Result<TrainLog, TrainFailure>) -> (TrainLog, Option<Error>) {
    match res {
        Ok(log) => (log, None),
        Err(TrainFailure { error, log }) => (log, Some(error)),
    }
}

fn run_fttnn(r: &Resolved, art: &Artifacts) -> Result<Outcome, CliError> {
    let spec = &r.spec;
    let mut model = spec.init_model(r.seed)?;
    let objective = spec.objective(r.seed)?;
    let set = match &spec.exact {
        Some(_) => Some(EvalSet::new(spec, r.eval)?),
        None => None,
    };
    let mut params = model.params();
    let mut work = model.clone();
    let mut loss = |p: &[f64]| -> fttnn::Result<(f64, Vec<f64>)> {
        work.set_params(p)?;
        let (v, g) = objective.value_and_grad(&work)?;
        Ok((v, g.0))
    };
    let mut probe = model.clone();
    let mut monitor = |p: &[f64]| -> Option<f64> {
        probe.set_params(p).ok()?;
        set.as_ref()?.relative_error(&probe).ok()
    };
    let ckpt_path = art.checkpoint();
    let mut saver = model.clone();
    let mut checkpoint = |p: &[f64], phase: Phase, epoch: usize| {
        let ok = saver.set_params(p).and_then(|_| saver.save(&ckpt_path));
        match ok {
            Ok(()) => log::info!("checkpoint after {phase} epoch {epoch}"),
            Err(e) => log::warn!("checkpoint failed: {e}"),
        }
    };
    let hooks = Hooks { monitor: Some(&mut monitor), checkpoint: Some(&mut checkpoint) };
    let (log, failure) = split(train_params(&mut params, &mut loss, &r.schedule, hooks));
    model.set_params(&params)?;
    model.save(art.checkpoint())?;
    if failure.is_some() {
        return Ok(Outcome { log, param_count: model.param_count(), final_loss: None, rel_error: None, lambda: None, failure });
    }
    let final_loss = match log.final_loss() {
        Some(v) => Some(v),
        None => Some(objective.value(&model)?),
    };
    let rel_error = match &set {
        Some(s) => Some(s.relative_error(&model)?),
        None => None,
    };
    let lambda = match spec.kind {
        ProblemKind::Eigenvalue => Some(rayleigh(&model, spec)?),
        _ => None,
    };
    Ok(Outcome { log, param_count: model.param_count(), final_loss, rel_error, lambda, failure })
}

#[derive(Serialize)]
struct BaselineNetFile<'a> {
    d: usize,
    hidden: usize,
    hard_boundary: Option<Vec<[f64; 2]>>,
    params: &'a [f64],
}

fn run_mc(r: &Resolved, art: &Artifacts) -> Result<Outcome, CliError> {
    let spec = &r.spec;
    let mut net = baseline_net(spec, r.baseline.hidden, r.seed)?;
    let (log, failure) = split(train_mc(spec, &mut net, r.baseline.samples, &r.schedule, r.eval));
    let file = BaselineNetFile {
        d: net.d,
        hidden: net.hidden,
        hard_boundary: net.boundary.as_ref().map(|b| b.iter().map(|iv| [iv.a, iv.b]).collect()),
        params: &net.params,
    };
    let json = serde_json::to_string(&file).map_err(|e| CliError::Other(e.to_string()))?;
    write_file(&art.baseline(), &json)?;
    if failure.is_some() {
        return Ok(Outcome { log, param_count: net.param_count(), final_loss: None, rel_error: None, lambda: None, failure });
    }
    let rel_error = match spec.exact {
        Some(_) => Some(mc_relative_error(&net, spec, r.eval)?),
        None => None,
    };
    let lambda = match spec.kind {
        ProblemKind::Eigenvalue => {
            let s = McSamples::draw(spec, r.baseline.samples, r.seed)?;
            Some(drm_value_and_grad(&net, &s)?.0)
        }
        _ => None,
    };
    Ok(Outcome { final_loss: log.final_loss(), log, param_count: net.param_count(), rel_error, lambda, failure })
}

fn run_tt_als(r: &Resolved) -> Result<(Outcome, String), CliError> {
    let start = Instant::now();
    let opts = AlsOptions { sweeps: r.baseline.sweeps, seed: r.seed, ..AlsOptions::default() };
    let out = ttd_on_grid(&r.spec, r.baseline.grid, r.baseline.fraction, r.baseline.rank, &opts)?;
    let wall = start.elapsed().as_secs_f64() * 1e3;
    // Same schema as training runs; one row per half-sweep, loss = observed RMSE.
    let mut csv = String::from(TrainLog::CSV_HEADER);
    csv.push('\n');
    let last = out.rmse.len() - 1;
    for (i, v) in out.rmse.iter().enumerate() {
        let re = if i == last { format!("{:e}", out.heldout_rel_error) } else { String::new() };
        let _ = writeln!(csv, "{i},als,{v:e},{re},{wall:.3}");
    }
    let outcome = Outcome {
        log: TrainLog::default(),
        param_count: out.param_count,
        final_loss: out.rmse.last().copied(),
        rel_error: Some(out.heldout_rel_error),
        lambda: None,
        failure: None,
    };
    Ok((outcome, csv))
}

/// Trains per the config and writes `metrics.csv`, the final model and `summary.json`.
pub fn run(cfg: &ExperimentConfig, output_override: Option<&Path>) -> Result<Summary, CliError> {
    let mut r = cfg.resolve()?;
    if let Some(o) = output_override {
        r.output = o.to_path_buf();
    }
    fs::create_dir_all(&r.output).map_err(|e| CliError::Config(format!("output: cannot create {}: {e}", r.output.display())))?;
    let art = Artifacts { dir: r.output.clone() };
    let start = Instant::now();
    log::info!("{} with {} (seed {})", r.spec.name, r.method, r.seed);
    let (outcome, csv) = match r.method {
        Method::Fttnn => {
            let o = run_fttnn(&r, &art)?;
            let csv = o.log.to_csv();
            (o, csv)
        }
        Method::Pinn | Method::Drm => {
            let o = run_mc(&r, &art)?;
            let csv = o.log.to_csv();
            (o, csv)
        }
        Method::TtAls => run_tt_als(&r)?,
    };
    write_file(&art.metrics(), &csv)?;
    let epochs = outcome.log.records.len();
    let summary = Summary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        status: if outcome.failure.is_some() { "failed".into() } else { "ok".into() },
        error: outcome.failure.as_ref().map(|e| e.to_string()),
        problem: r.spec.name.clone(),
        method: r.method.to_string(),
        seed: r.seed,
        param_count: outcome.param_count,
        epochs,
        final_loss: outcome.final_loss.or_else(|| outcome.log.final_loss()),
        rel_error: outcome.rel_error,
        lambda: outcome.lambda,
        reference_lambda: r.spec.exact_lambda,
        fallbacks: outcome.log.fallbacks,
        wall_time_s: start.elapsed().as_secs_f64(),
        config: serde_json::to_value(cfg).map_err(|e| CliError::Other(e.to_string()))?,
        git_describe: GIT_DESCRIBE.to_string(),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Other(e.to_string()))?;
    write_file(&art.summary(), &json)?;
    if let Some(e) = outcome.failure {
        return Err(CliError::Numerical(format!("{e} (partial artifacts in {})", art.dir.display())));
    }
    Ok(summary)
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (a + b)];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Arguments of `export-slice`.
#[derive(Debug, Clone)]
pub struct SliceRequest {
    pub problem: String,
    /// Zero-based free dimensions.
    pub free: [usize; 2],
    /// `(dimension, value)` pairs; other non-free dimensions sit at the box midpoint.
    pub fixed: Vec<(usize, f64)>,
    pub resolution: usize,
}

/// CSV of the model on a `resolution × resolution` grid over two free dimensions:
/// `x_a,x_b,u_model[,u_exact,diff]`. Grid points outside the domain are skipped.
pub fn export_slice(model: &FttModel<f64>, spec: &ProblemSpec, req: &SliceRequest) -> Result<String, CliError> {
    let d = spec.dim();
    if model.dim() != d {
        return Err(CliError::Config(format!("checkpoint is {}-dimensional, {} is {d}-dimensional", model.dim(), spec.name)));
    }
    let [fa, fb] = req.free;
    if fa == fb || fa >= d || fb >= d {
        return Err(CliError::Config(format!("free: need two distinct dimensions below {d}")));
    }
    if req.resolution == 0 {
        return Err(CliError::Config("resolution: must be positive".into()));
    }
    let bounds = spec.domain.bounding();
    let mut nodes: Vec<Vec<f64>> = bounds.iter().map(|iv| vec![0.5 * (iv.a + iv.b)]).collect();
    for &(k, v) in &req.fixed {
        if k >= d || k == fa || k == fb {
            return Err(CliError::Config(format!("fixed: dimension {k} is free or out of range")));
        }
        if !bounds[k].contains_closed(v) {
            return Err(CliError::Config(format!("fixed: x{k} = {v} lies outside the domain ({}, {})", bounds[k].a, bounds[k].b)));
        }
        nodes[k] = vec![v];
    }
    nodes[fa] = linspace(bounds[fa].a, bounds[fa].b, req.resolution);
    nodes[fb] = linspace(bounds[fb].a, bounds[fb].b, req.resolution);
    let values = model.eval_grid(&nodes)?;
    let (lo, hi) = (fa.min(fb), fa.max(fb));
    let mut csv = format!("x{fa},x{fb},u_model");
    if spec.exact.is_some() {
        csv.push_str(",u_exact,diff");
    }
    csv.push('\n');
    let mut x: Vec<f64> = nodes.iter().map(|n| n[0]).collect();
    let n = req.resolution;
    let mut written = 0;
    for i in 0..n {
        for j in 0..n {
            // eval_grid orders the lower free dimension first.
            let (ilo, ihi) = (i, j);
            x[lo] = nodes[lo][ilo];
            x[hi] = nodes[hi][ihi];
            if !spec.domain.contains(&x) {
                continue;
            }
            let u = values[ilo * n + ihi];
            let _ = write!(csv, "{:?},{:?},{:?}", x[fa], x[fb], u);
            if let Some(t) = &spec.exact {
                let e = t.eval(&x);
                let _ = write!(csv, ",{e:?},{:?}", u - e);
            }
            csv.push('\n');
            written += 1;
        }
    }
    if written == 0 {
        return Err(CliError::Config("slice does not intersect the domain".into()));
    }
    Ok(csv)
}

#[derive(Debug, Serialize)]
pub struct CheckpointReport {
    pub problem: String,
    pub param_count: usize,
    pub ranks: Vec<usize>,
    pub residual_loss: Option<f64>,
    pub boundary_loss: Option<f64>,
    pub rel_error: Option<f64>,
    pub lambda: Option<f64>,
}

/// Metrics of a saved model against a problem.
pub fn eval_checkpoint(model: &FttModel<f64>, spec: &ProblemSpec, eval: EvalSpec) -> Result<CheckpointReport, CliError> {
    if model.dim() != spec.dim() {
        return Err(CliError::Config(format!("checkpoint is {}-dimensional, {} is {}-dimensional", model.dim(), spec.name, spec.dim())));
    }
    let elliptic = spec.kind == ProblemKind::Elliptic;
    Ok(CheckpointReport {
        problem: spec.name.clone(),
        param_count: model.param_count(),
        ranks: model.ranks().to_vec(),
        residual_loss: if elliptic { Some(spec.residual_loss(model)?) } else { None },
        boundary_loss: if elliptic { Some(spec.boundary_loss(model)?) } else { None },
        rel_error: match spec.exact {
            Some(_) => Some(EvalSet::new(spec, eval)?.relative_error(model)?),
            None => None,
        },
        lambda: if spec.kind == ProblemKind::Eigenvalue { Some(rayleigh(model, spec)?) } else { None },
    })
}

pub fn load_checkpoint(path: &Path) -> Result<FttModel<f64>, CliError> {
    FttModel::load(path).map_err(|e| CliError::Config(format!("checkpoint {}: {e}", path.display())))
}

pub fn problem(name: &str) -> Result<ProblemSpec, CliError> {
    builtin(name).map_err(|e| CliError::Config(format!("problem: {e}")))
}

/// Parses `grid:N` or `random:N[:SEED]`.
pub fn parse_eval(s: &str) -> Result<EvalSpec, CliError> {
    let bad = || CliError::Config(format!("eval: expected grid:N or random:N[:SEED], got `{s}`"));
    let parts: Vec<&str> = s.split(':').collect();
    let num = |p: &str| p.parse::<u64>().ok().filter(|&n| n > 0);
    match parts.as_slice() {
        ["grid", n] => Ok(EvalSpec::TensorGrid { n: num(n).ok_or_else(bad)? as usize }),
        ["random", n] => Ok(EvalSpec::RandomUniform { n: num(n).ok_or_else(bad)? as usize, seed: 0 }),
        ["random", n, seed] => Ok(EvalSpec::RandomUniform { n: num(n).ok_or_else(bad)? as usize, seed: seed.parse().map_err(|_| bad())? }),
        _ => Err(bad()),
    }
}

/// Parses `K=V` with a zero-based dimension `K`.
pub fn parse_fixed(s: &str) -> Result<(usize, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected DIM=VALUE, got `{s}`"))?;
    let k = k.trim().trim_start_matches('x').parse::<usize>().map_err(|e| format!("dimension `{k}`: {e}"))?;
    let v = fttnn::assembly::parse_number(v).map_err(|e| e.to_string())?;
    Ok((k, v))
}
