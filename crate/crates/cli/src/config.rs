//! Experiment configuration: a TOML document naming a built-in problem (or
//! defining one inline) plus optional overrides.
//!
//! ```toml
//! problem = "poisson-d3"        # or a [problem] table, see `InlineProblem`
//! method = "fttnn"              # fttnn | pinn | drm | tt-als
//! seed = 0
//! output = "runs/poisson-d3"
//!
//! [model]
//! rank = 2
//! hidden = 50
//!
//! [quadrature]
//! n_sub = 30                    # one value for every dimension, or a list
//! n_pts = 30
//!
//! [schedule]
//! adam_epochs = 5000
//! adam_lr = 3e-3
//! lbfgs_epochs = 1000
//! lbfgs_lr = 0.1
//! log_every = 100
//! checkpoint_every = 0
//! lbfgs_iters = 1               # L-BFGS iterations per epoch
//! lbfgs_history = 10
//! decay_every = 0               # halve (decay_factor) the rate every K epochs; 0 = off
//! decay_factor = 0.5
//!
//! [eval]
//! kind = "grid"                 # grid | random
//! n = 101
//! seed = 0
//!
//! [baseline]                    # PINN / DRM / TT-ALS settings
//! hidden = 100
//! samples = 5000
//! grid = 30
//! fraction = 0.15
//! rank = 2
//! sweeps = 30
//! ```

use std::fmt;
use std::path::PathBuf;

use fttnn::assembly::{parse_number, BoxDomain, Factor, FieldTerm, QuadSpec, SeparableField};
use fttnn::optim::{LrDecay, Schedule};
use fttnn::problems::{builtin, BoundaryTreatment, EvalSpec, ProblemKind, ProblemSpec, Reported, Target};
use fttnn::quadrature::Interval;
use serde::{Deserialize, Serialize};

/// A configuration problem, located by its dotted field path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl fmt::Display) -> Self {
        Self { path: path.into(), message: message.to_string() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            f.write_str(&self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

type CResult<T> = Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Fttnn,
    Pinn,
    Drm,
    TtAls,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Fttnn => "fttnn",
            Method::Pinn => "pinn",
            Method::Drm => "drm",
            Method::TtAls => "tt-als",
        })
    }
}

/// A number written either literally or as a multiple of π (`"2pi"`, `"pi/2"`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Num {
    Value(f64),
    Text(String),
}

impl Num {
    fn resolve(&self, path: &str) -> CResult<f64> {
        match self {
            Num::Value(v) => Ok(*v),
            Num::Text(s) => parse_number(s).map_err(|e| ConfigError::new(path, e)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(usize),
    Many(Vec<usize>),
}

impl OneOrMany {
    fn expand(&self, d: usize, path: &str) -> CResult<Vec<usize>> {
        let v = match self {
            OneOrMany::One(n) => vec![*n; d],
            OneOrMany::Many(v) if v.len() == d => v.clone(),
            OneOrMany::Many(v) => return Err(ConfigError::new(path, format!("{} values for a {d}-dimensional problem", v.len()))),
        };
        if v.contains(&0) {
            return Err(ConfigError::new(path, "counts must be positive"));
        }
        Ok(v)
    }
}

/// One separable term: `coeff · Π factors[i](x_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermConfig {
    #[serde(default = "one")]
    pub coeff: Num,
    /// Factor strings from the whitelist: `const(c)`, `[amp*]sin(freq[, phase])`,
    /// `[amp*]cos(...)`, `[amp*]exp(rate)`, `poly(c0, c1, ...)`.
    pub factors: Vec<String>,
}

fn one() -> Num {
    Num::Value(1.0)
}

fn field_from(terms: &[TermConfig], d: usize, path: &str) -> CResult<SeparableField> {
    let mut out = Vec::with_capacity(terms.len());
    for (i, t) in terms.iter().enumerate() {
        let tp = format!("{path}[{i}]");
        if t.factors.len() != d {
            return Err(ConfigError::new(format!("{tp}.factors"), format!("{} factors for a {d}-dimensional problem", t.factors.len())));
        }
        let factors = t
            .factors
            .iter()
            .enumerate()
            .map(|(k, s)| s.parse::<Factor>().map_err(|e| ConfigError::new(format!("{tp}.factors[{k}]"), e)))
            .collect::<CResult<Vec<_>>>()?;
        out.push(FieldTerm::new(t.coeff.resolve(&format!("{tp}.coeff"))?, factors));
    }
    SeparableField::new(out).map_err(|e| ConfigError::new(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BoundaryConfig {
    Hard,
    Soft {
        beta: f64,
        spacing: f64,
        #[serde(default)]
        g: Vec<TermConfig>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KindConfig {
    Elliptic,
    Eigenvalue,
    Supervised,
}

/// A problem defined in the config file: `−c₁Δu + b u = f` (elliptic),
/// `−Δu + V u = λu` (eigenvalue) or fitting `exact` from samples (supervised).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineProblem {
    pub name: String,
    pub kind: KindConfig,
    /// Disjoint boxes; each is a list of `[a, b]` intervals.
    pub boxes: Vec<Vec<[Num; 2]>>,
    #[serde(default = "one")]
    pub c1: Num,
    #[serde(default)]
    pub b: Vec<TermConfig>,
    #[serde(default)]
    pub f: Vec<TermConfig>,
    #[serde(default)]
    pub potential: Vec<TermConfig>,
    pub exact: Option<Vec<TermConfig>>,
    pub exact_lambda: Option<f64>,
    #[serde(default = "hard")]
    pub boundary: BoundaryConfig,
    pub rank: usize,
    pub hidden: usize,
    #[serde(default)]
    pub samples: usize,
}

fn hard() -> BoundaryConfig {
    BoundaryConfig::Hard
}

impl InlineProblem {
    fn to_spec(&self) -> CResult<ProblemSpec> {
        let mut boxes = Vec::with_capacity(self.boxes.len());
        for (i, bx) in self.boxes.iter().enumerate() {
            let mut ivs = Vec::with_capacity(bx.len());
            for (k, [a, b]) in bx.iter().enumerate() {
                let p = format!("problem.boxes[{i}][{k}]");
                let iv = Interval::new(a.resolve(&p)?, b.resolve(&p)?).map_err(|e| ConfigError::new(&p, e))?;
                ivs.push(iv);
            }
            boxes.push(ivs);
        }
        let domain = BoxDomain::new(boxes).map_err(|e| ConfigError::new("problem.boxes", e))?;
        let d = domain.dim();
        let kind = match self.kind {
            KindConfig::Elliptic => ProblemKind::Elliptic,
            KindConfig::Eigenvalue => ProblemKind::Eigenvalue,
            KindConfig::Supervised => ProblemKind::SupervisedApprox,
        };
        let boundary = match &self.boundary {
            BoundaryConfig::Hard => BoundaryTreatment::Hard,
            BoundaryConfig::Soft { beta, spacing, g } => BoundaryTreatment::Soft {
                beta: *beta,
                spacing: *spacing,
                g: field_from(g, d, "problem.boundary.g")?,
            },
        };
        let exact = match &self.exact {
            Some(t) => Some(Target::Separable(field_from(t, d, "problem.exact")?)),
            None => None,
        };
        Ok(ProblemSpec {
            name: self.name.clone(),
            kind,
            c1: self.c1.resolve("problem.c1")?,
            b: field_from(&self.b, d, "problem.b")?,
            f: field_from(&self.f, d, "problem.f")?,
            potential: field_from(&self.potential, d, "problem.potential")?,
            boundary,
            exact,
            exact_lambda: self.exact_lambda,
            rank: self.rank,
            hidden: self.hidden,
            quad: QuadSpec::uniform(d, 20, 20),
            schedule: Schedule::default(),
            samples: self.samples,
            baseline: None,
            reported: Reported::default(),
            domain,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub rank: Option<usize>,
    pub hidden: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadOverrides {
    pub n_sub: Option<OneOrMany>,
    pub n_pts: Option<OneOrMany>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleOverrides {
    pub adam_epochs: Option<usize>,
    pub adam_lr: Option<f64>,
    pub lbfgs_epochs: Option<usize>,
    pub lbfgs_lr: Option<f64>,
    pub log_every: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub lbfgs_iters: Option<usize>,
    pub lbfgs_history: Option<usize>,
    pub decay_every: Option<usize>,
    pub decay_factor: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalKind {
    Grid,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub kind: EvalKind,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineOverrides {
    pub hidden: Option<usize>,
    pub samples: Option<usize>,
    pub grid: Option<usize>,
    pub fraction: Option<f64>,
    pub rank: Option<usize>,
    pub sweeps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Built-in problem name, or an inline table (kept raw to report field paths).
    pub problem: toml::Value,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default)]
    pub quadrature: QuadOverrides,
    #[serde(default)]
    pub schedule: ScheduleOverrides,
    pub eval: Option<EvalConfig>,
    #[serde(default)]
    pub baseline: BaselineOverrides,
}

/// Baseline settings after defaults are applied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineResolved {
    pub hidden: usize,
    pub samples: usize,
    pub grid: usize,
    pub fraction: f64,
    pub rank: usize,
    pub sweeps: usize,
}

/// A configuration with every default filled in and every field checked.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub spec: ProblemSpec,
    pub method: Method,
    pub seed: u64,
    pub output: PathBuf,
    pub schedule: Schedule,
    pub eval: EvalSpec,
    pub baseline: BaselineResolved,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CResult<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            ConfigError::new("", if msg.is_empty() { e.to_string() } else { format!("{msg} ({})", e.to_string().lines().next().unwrap_or("")) })
        })
    }

    pub fn load(path: &std::path::Path) -> CResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn resolve(&self) -> CResult<Resolved> {
        let mut spec = match &self.problem {
            toml::Value::String(name) => builtin(name).map_err(|e| ConfigError::new("problem", e))?,
            v @ toml::Value::Table(_) => {
                let inline: InlineProblem = v.clone().try_into().map_err(|e: toml::de::Error| ConfigError::new("problem", e.message()))?;
                inline.to_spec()?
            }
            _ => return Err(ConfigError::new("problem", "expected a built-in name or a table")),
        };
        let d = spec.dim();
        if let Some(r) = self.model.rank {
            spec.rank = r;
        }
        if let Some(h) = self.model.hidden {
            spec.hidden = h;
        }
        let source = if self.problem.is_str() { "model" } else { "problem" };
        if spec.rank == 0 {
            return Err(ConfigError::new(format!("{source}.rank"), "ranks must be positive (got 0)"));
        }
        if spec.hidden == 0 {
            return Err(ConfigError::new(format!("{source}.hidden"), "hidden width must be positive (got 0)"));
        }
        if let Some(v) = &self.quadrature.n_sub {
            spec.quad.n_sub = v.expand(d, "quadrature.n_sub")?;
        }
        if let Some(v) = &self.quadrature.n_pts {
            spec.quad.n_pts = v.expand(d, "quadrature.n_pts")?;
        }

        let s = &self.schedule;
        let mut schedule = spec.schedule.clone();
        schedule.adam_epochs = s.adam_epochs.unwrap_or(schedule.adam_epochs);
        schedule.lbfgs_epochs = s.lbfgs_epochs.unwrap_or(schedule.lbfgs_epochs);
        schedule.adam_lr = s.adam_lr.unwrap_or(schedule.adam_lr);
        schedule.lbfgs_lr = s.lbfgs_lr.unwrap_or(schedule.lbfgs_lr);
        schedule.log_every = s.log_every.unwrap_or(schedule.log_every);
        schedule.checkpoint_every = s.checkpoint_every.unwrap_or(schedule.checkpoint_every);
        schedule.lbfgs_iters = s.lbfgs_iters.unwrap_or(schedule.lbfgs_iters);
        schedule.lbfgs_history = s.lbfgs_history.unwrap_or(schedule.lbfgs_history);
        schedule.seed = self.seed;
        for (name, lr) in [("adam_lr", schedule.adam_lr), ("lbfgs_lr", schedule.lbfgs_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(ConfigError::new(format!("schedule.{name}"), "learning rate must be positive"));
            }
        }
        for (name, v) in [("log_every", schedule.log_every), ("lbfgs_iters", schedule.lbfgs_iters), ("lbfgs_history", schedule.lbfgs_history)] {
            if v == 0 {
                return Err(ConfigError::new(format!("schedule.{name}"), "must be positive"));
            }
        }
        match s.decay_every {
            Some(0) | None => {}
            Some(every) => {
                let factor = s.decay_factor.unwrap_or(0.5);
                if !(factor > 0.0 && factor <= 1.0) {
                    return Err(ConfigError::new("schedule.decay_factor", "must lie in (0, 1]"));
                }
                schedule.decay = Some(LrDecay { every, factor });
            }
        }
        spec.schedule = schedule.clone();

        spec.validate().map_err(|e| ConfigError::new("problem", e))?;

        let eval = match &self.eval {
            None => EvalSpec::default_for(d),
            Some(EvalConfig { n: 0, .. }) => return Err(ConfigError::new("eval.n", "must be positive")),
            Some(EvalConfig { kind: EvalKind::Grid, n, .. }) => EvalSpec::TensorGrid { n: *n },
            Some(EvalConfig { kind: EvalKind::Random, n, seed }) => EvalSpec::RandomUniform { n: *n, seed: *seed },
        };

        let compatible = match self.method {
            Method::Fttnn => true,
            Method::Pinn => spec.kind == ProblemKind::Elliptic,
            Method::Drm => spec.kind == ProblemKind::Eigenvalue,
            Method::TtAls => spec.kind == ProblemKind::SupervisedApprox,
        };
        if !compatible {
            return Err(ConfigError::new("method", format!("{} does not apply to a {:?} problem", self.method, spec.kind)));
        }
        let defaults = spec.baseline.clone();
        let b = &self.baseline;
        let baseline = BaselineResolved {
            hidden: b.hidden.or(defaults.as_ref().map(|x| x.hidden).filter(|&h| h > 0)).unwrap_or(100),
            samples: b.samples.or(defaults.as_ref().map(|x| x.samples).filter(|&n| n > 0)).unwrap_or(10_000),
            grid: b.grid.or(defaults.as_ref().map(|x| x.grid).filter(|&n| n > 0)).unwrap_or(30),
            fraction: b.fraction.or(defaults.as_ref().map(|x| x.fraction).filter(|&f| f > 0.0)).unwrap_or(0.15),
            rank: b.rank.unwrap_or(spec.rank),
            sweeps: b.sweeps.unwrap_or(30),
        };
        if self.method != Method::Fttnn {
            let bad = |field: &str, msg: &str| Err(ConfigError::new(format!("baseline.{field}"), msg));
            match self.method {
                Method::Pinn | Method::Drm if baseline.hidden == 0 => return bad("hidden", "must be positive"),
                Method::Pinn | Method::Drm if baseline.samples == 0 => return bad("samples", "must be positive"),
                Method::TtAls if baseline.grid < 2 => return bad("grid", "needs at least 2 points"),
                Method::TtAls if !(baseline.fraction > 0.0 && baseline.fraction <= 1.0) => return bad("fraction", "must lie in (0, 1]"),
                Method::TtAls if baseline.rank == 0 => return bad("rank", "ranks must be positive (got 0)"),
                _ => {}
            }
        }
        let output = self.output.clone().unwrap_or_else(|| PathBuf::from("runs").join(&spec.name));
        Ok(Resolved { spec, method: self.method, seed: self.seed, output, schedule, eval, baseline })
    }
}

/// One-line description of the quadrature, e.g. `30 subintervals × 30 points per dimension`.
pub fn describe_quadrature(q: &QuadSpec) -> String {
    let uniform = |v: &[usize]| v.iter().all(|&n| n == v[0]);
    if uniform(&q.n_sub) && uniform(&q.n_pts) {
        format!("{} subintervals × {} points per dimension", q.n_sub[0], q.n_pts[0])
    } else {
        format!("subintervals {:?} × points {:?}", q.n_sub, q.n_pts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_with_overrides() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            problem = "poisson-d3"
            seed = 4
            [model]
            hidden = 20
            [quadrature]
            n_sub = [10, 12, 14]
            [schedule]
            adam_epochs = 7
            decay_every = 3
            "#,
        )
        .unwrap();
        let r = cfg.resolve().unwrap();
        assert_eq!(r.spec.hidden, 20);
        assert_eq!(r.spec.quad.n_sub, vec![10, 12, 14]);
        assert_eq!(r.spec.quad.n_pts, vec![30; 3]);
        assert_eq!(r.schedule.adam_epochs, 7);
        assert_eq!(r.schedule.lbfgs_epochs, 1000);
        assert_eq!(r.schedule.seed, 4);
        assert_eq!(r.schedule.decay, Some(LrDecay { every: 3, factor: 0.5 }));
        assert_eq!(r.eval, EvalSpec::TensorGrid { n: 101 });
        assert_eq!(r.baseline.hidden, 100);
    }

    #[test]
    fn zero_rank_names_ranks() {
        let cfg = ExperimentConfig::from_toml("problem = \"poisson-d3\"\n[model]\nrank = 0\n").unwrap();
        let e = cfg.resolve().unwrap_err();
        assert_eq!(e.path, "model.rank");
        assert!(e.to_string().contains("ranks"));
    }

    #[test]
    fn errors_carry_field_paths() {
        let e = ExperimentConfig::from_toml("problem = \"nope\"").unwrap().resolve().unwrap_err();
        assert_eq!(e.path, "problem");
        let e = ExperimentConfig::from_toml("problem = \"poisson-d3\"\n[quadrature]\nn_pts = [1, 2]\n").unwrap().resolve().unwrap_err();
        assert_eq!(e.path, "quadrature.n_pts");
        let e = ExperimentConfig::from_toml("problem = \"poisson-d3\"\nmethod = \"drm\"\n").unwrap().resolve().unwrap_err();
        assert_eq!(e.path, "method");
        assert!(ExperimentConfig::from_toml("problem = \"poisson-d3\"\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("problem = \"poisson-d3\"\nmethod = \"sgd\"\n").is_err());
    }

    #[test]
    fn inline_problem() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            [problem]
            name = "helmholtz-2d"
            kind = "elliptic"
            boxes = [[[0, 1], [0, 1]]]
            rank = 2
            hidden = 10
            b = [{ coeff = -1, factors = ["const(1)", "const(1)"] }]
            f = [{ coeff = "8*pi*pi", factors = ["sin(2pi)", "sin(2pi)"] }]
            exact = [{ factors = ["sin(2pi)", "sin(2pi)"] }]
            "#,
        )
        .unwrap();
        let r = cfg.resolve().unwrap();
        assert_eq!(r.spec.dim(), 2);
        assert_eq!(r.spec.boundary, BoundaryTreatment::Hard);
        assert!((r.spec.f.eval(&[0.25, 0.25]) - 8.0 * std::f64::consts::PI.powi(2)).abs() < 1e-9);

        let bad = r#"
            [problem]
            name = "x"
            kind = "elliptic"
            boxes = [[[0, 1], [0, 1]]]
            rank = 2
            hidden = 10
            f = [{ factors = ["sin(2pi)", "tan(1)"] }]
            "#;
        let e = ExperimentConfig::from_toml(bad).unwrap().resolve().unwrap_err();
        assert_eq!(e.path, "problem.f[0].factors[1]");
    }

    #[test]
    fn quadrature_description() {
        let r = ExperimentConfig::from_toml("problem = \"poisson-d3\"").unwrap().resolve().unwrap();
        assert_eq!(describe_quadrature(&r.spec.quad), "30 subintervals × 30 points per dimension");
    }
}
