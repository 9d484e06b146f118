//! Built-in benchmark problems, error metrics and wave-number continuation.
//!
//! Every operator here is `L u = −c₁Δu + b(x)u` with separable `b` and `f`, or
//! the Schrödinger eigenvalue problem `−Δu + V u = λu`, or plain function
//! approximation from samples. Each spec carries the model shape, quadrature
//! and training schedule used for it.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;

use crate::assembly::{
    boundary_functional, energy_functionals, field_square_integral, residual_functional, volume_rules, BoxDomain,
    EllipticOperator, Factor, FieldTerm, QuadSpec, SepTerm, SeparableField, TermKind,
};
use crate::corenet::InitScheme;
use crate::fttmodel::{FttModel, ModelShape};
use crate::gradients::{Objective, RayleighQuotient, Supervised, WeightedSum};
use crate::optim::{train, Schedule, TrainFailure, TrainLog};
use crate::quadrature::{gauss_legendre, Interval};
use crate::rng::{rng_for, stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    SupervisedApprox,
    Elliptic,
    Eigenvalue,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryTreatment {
    /// Each core carries the factor `(x − a)(b − x)` of its bounding interval.
    Hard,
    /// `β ∫_{∂Ω} (u − g)²`, midpoint rule with the given spacing.
    Soft { beta: f64, g: SeparableField, spacing: f64 },
}

/// Closed-form reference solution.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Separable(SeparableField),
    /// `1 / √(Σ x_i² + eps)`
    InverseNorm { eps: f64 },
}

impl Target {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Target::Separable(f) => f.eval(x),
            Target::InverseNorm { eps } => 1.0 / (x.iter().map(|v| v * v).sum::<f64>() + eps).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    Pinn,
    Drm,
    TtAls,
}

/// Settings of the comparison method used for a problem.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSettings {
    pub method: BaselineMethod,
    /// Hidden width of the Monte-Carlo network (PINN / DRM).
    pub hidden: usize,
    /// Monte-Carlo sample count (PINN / DRM).
    pub samples: usize,
    /// Grid points per dimension and observed fraction (TT-ALS).
    pub grid: usize,
    pub fraction: f64,
}

/// Values reported for the problem in the reference tables.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Reported {
    pub rel_error: Option<f64>,
    pub baseline_rel_error: Option<f64>,
    pub lambda: Option<f64>,
    pub baseline_lambda: Option<f64>,
    pub param_count: Option<usize>,
    pub baseline_param_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub name: String,
    pub kind: ProblemKind,
    pub domain: BoxDomain,
    pub c1: f64,
    pub b: SeparableField,
    pub f: SeparableField,
    pub potential: SeparableField,
    pub boundary: BoundaryTreatment,
    pub exact: Option<Target>,
    pub exact_lambda: Option<f64>,
    pub rank: usize,
    pub hidden: usize,
    pub quad: QuadSpec,
    pub schedule: Schedule,
    /// Training-set size for supervised approximation.
    pub samples: usize,
    pub baseline: Option<BaselineSettings>,
    pub reported: Reported,
}

/// Evaluation point set for the relative error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalSpec {
    /// `n` equispaced points per dimension including the endpoints of the bounding box.
    TensorGrid { n: usize },
    RandomUniform { n: usize, seed: u64 },
}

impl EvalSpec {
    /// 101 points per dimension up to d = 3, otherwise 10⁵ uniform points (seed 0).
    pub fn default_for(d: usize) -> Self {
        if d <= 3 {
            EvalSpec::TensorGrid { n: 101 }
        } else {
            EvalSpec::RandomUniform { n: 100_000, seed: 0 }
        }
    }
}

fn cube(d: usize, a: f64, b: f64) -> BoxDomain {
    BoxDomain::cube(d, a, b).expect("valid cube")
}

fn term(coeff: f64, factors: Vec<Factor>) -> FieldTerm {
    FieldTerm::new(coeff, factors)
}

fn field(terms: Vec<FieldTerm>) -> SeparableField {
    SeparableField::new(terms).expect("consistent dimensions")
}

/// `Σ_k g(x_k) Π_{i≠k} h(x_i)`
fn one_off_sum(d: usize, coeff: f64, special: Factor, other: Factor) -> SeparableField {
    field(
        (0..d)
            .map(|k| {
                let mut f = vec![other.clone(); d];
                f[k] = special.clone();
                term(coeff, f)
            })
            .collect(),
    )
}

pub const BUILTIN_NAMES: &[&str] = &[
    "singular-approx-d4",
    "singular-approx-d6",
    "poisson-lshape",
    "poisson-d3",
    "poisson-d5",
    "poisson-d7",
    "helmholtz-d3",
    "helmholtz-d5",
    "helmholtz-k3pi",
    "helmholtz-k5pi",
    "helmholtz-k10pi",
    "helmholtz-k15pi",
    "helmholtz-k20pi",
    "helmholtz-k25pi",
    "schrodinger-d5",
    "schrodinger-d10",
];

fn base(name: &str, kind: ProblemKind, domain: BoxDomain, rank: usize, hidden: usize, quad: (usize, usize)) -> ProblemSpec {
    let d = domain.dim();
    ProblemSpec {
        name: name.to_string(),
        kind,
        domain,
        c1: 1.0,
        b: SeparableField::zero(),
        f: SeparableField::zero(),
        potential: SeparableField::zero(),
        boundary: BoundaryTreatment::Hard,
        exact: None,
        exact_lambda: None,
        rank,
        hidden,
        quad: QuadSpec::uniform(d, quad.0, quad.1),
        schedule: Schedule::new(5000, 3e-3, 1000, 0.1),
        samples: 0,
        baseline: None,
        reported: Reported::default(),
    }
}

fn pinn(hidden: usize, samples: usize) -> Option<BaselineSettings> {
    Some(BaselineSettings { method: BaselineMethod::Pinn, hidden, samples, grid: 0, fraction: 0.0 })
}

fn singular(d: usize, rank: usize, reported: Reported) -> ProblemSpec {
    let mut s = base(&format!("singular-approx-d{d}"), ProblemKind::SupervisedApprox, cube(d, -1.0, 1.0), rank, 30, (1, 1));
    s.boundary = BoundaryTreatment::Soft { beta: 0.0, g: SeparableField::zero(), spacing: 1.0 };
    s.exact = Some(Target::InverseNorm { eps: 1e-12 });
    s.samples = 100_000;
    s.baseline = Some(BaselineSettings { method: BaselineMethod::TtAls, hidden: 0, samples: 0, grid: 30, fraction: 0.15 });
    s.reported = reported;
    s
}

fn poisson(d: usize, rank: usize, hidden: usize, pinn_samples: usize, reported: Reported) -> ProblemSpec {
    let mut s = base(&format!("poisson-d{d}"), ProblemKind::Elliptic, cube(d, -1.0, 1.0), rank, hidden, (30, 30));
    let exact = one_off_sum(d, 1.0, Factor::sin(2.0 * PI), Factor::sin(PI));
    s.f = exact.scaled((d as f64 + 3.0) * PI * PI);
    s.exact = Some(Target::Separable(exact));
    s.baseline = pinn(100, pinn_samples);
    s.reported = reported;
    s
}

fn helmholtz(d: usize, rank: usize, hidden: usize, pinn_samples: usize, reported: Reported) -> ProblemSpec {
    let mut s = base(&format!("helmholtz-d{d}"), ProblemKind::Elliptic, cube(d, 0.0, 1.0), rank, hidden, (40, 40));
    s.b = SeparableField::constant(d, -1.0);
    let exact = field(vec![term(1.0, vec![Factor::sin(2.0 * PI); d])]);
    s.f = exact.scaled(4.0 * PI * PI * d as f64 - 1.0);
    s.exact = Some(Target::Separable(exact));
    s.baseline = pinn(100, pinn_samples);
    s.reported = reported;
    s
}

/// Wave-number variant `−Δu − k²u = 2 Π sin(k x_i)` on the unit cube, `k = m π`.
pub fn helmholtz_wave(m: u32) -> ProblemSpec {
    let d = 3;
    let k = m as f64 * PI;
    let mut s = base(&format!("helmholtz-k{m}pi"), ProblemKind::Elliptic, cube(d, 0.0, 1.0), 2, 40, (40, 40));
    s.b = SeparableField::constant(d, -k * k);
    s.f = field(vec![term(2.0, vec![Factor::sin(k); d])]);
    s.exact = Some(Target::Separable(field(vec![term(1.0 / (k * k), vec![Factor::sin(k); d])])));
    s.schedule = Schedule::new(3000, 3e-3, 2000, 0.1);
    s.reported.rel_error = match m {
        3 => Some(7.0e-5),
        5 => Some(2.6e-4),
        10 => Some(9.0e-4),
        15 => Some(2.6e-3),
        20 => Some(1.9e-3),
        25 => Some(2.0e-3),
        _ => None,
    };
    s
}

fn schrodinger(d: usize, rank: usize, hidden: usize, samples: usize, reported: Reported) -> ProblemSpec {
    let mut s = base(&format!("schrodinger-d{d}"), ProblemKind::Eigenvalue, cube(d, -1.0, 1.0), rank, hidden, (20, 20));
    s.potential = one_off_sum(d, 1.0 / d as f64, Factor::Cos { amp: 1.0, freq: PI, phase: PI }, Factor::Const(1.0));
    s.exact_lambda = reported.lambda;
    s.schedule = Schedule::new(3000, 1e-4, 4000, 1e-4);
    s.baseline = Some(BaselineSettings { method: BaselineMethod::Drm, hidden: 100, samples, grid: 0, fraction: 0.0 });
    s.reported = reported;
    s
}

fn lshape() -> ProblemSpec {
    let iv = |a: f64, b: f64| Interval::new(a, b).expect("valid interval");
    let domain = BoxDomain::new(vec![
        vec![iv(-1.0, 0.0), iv(-1.0, 1.0), iv(-1.0, 1.0)],
        vec![iv(0.0, 1.0), iv(0.0, 1.0), iv(-1.0, 1.0)],
    ])
    .expect("disjoint boxes");
    let mut s = base("poisson-lshape", ProblemKind::Elliptic, domain, 2, 50, (40, 20));
    let cubic = Factor::Poly(vec![0.0, 1.0, 0.0, -1.0]);
    let bump = Factor::Poly(vec![1.0, 0.0, -1.0]);
    let six_x = Factor::Poly(vec![0.0, 6.0]);
    s.exact = Some(Target::Separable(field(vec![term(1.0, vec![cubic.clone(), cubic.clone(), bump.clone()])])));
    s.f = field(vec![
        term(1.0, vec![six_x.clone(), cubic.clone(), bump.clone()]),
        term(1.0, vec![cubic.clone(), six_x, bump]),
        term(2.0, vec![cubic.clone(), cubic, Factor::Const(1.0)]),
    ]);
    s.boundary = BoundaryTreatment::Soft { beta: 100.0, g: SeparableField::zero(), spacing: 0.1 };
    s.baseline = pinn(90, 12_000);
    s.reported = Reported { rel_error: Some(7.2e-4), baseline_rel_error: Some(1.3e-3), ..Reported::default() };
    s
}

/// Looks up a built-in problem by name.
pub fn builtin(name: &str) -> Result<ProblemSpec> {
    let r = |e: f64, b: f64| Reported { rel_error: Some(e), baseline_rel_error: Some(b), ..Reported::default() };
    let spec = match name {
        "singular-approx-d4" => singular(4, 2, Reported { param_count: Some(4332), baseline_param_count: Some(360), ..r(4.9e-2, 4.1e-1) }),
        "singular-approx-d6" => singular(6, 3, Reported { param_count: Some(7242), baseline_param_count: Some(5400), ..r(3.6e-3, 2.2e-1) }),
        "poisson-lshape" => lshape(),
        "poisson-d3" => poisson(3, 2, 50, 5000, r(2.6e-5, 5.5e-5)),
        "poisson-d5" => poisson(5, 3, 40, 10_000, r(2.5e-4, 2.0e-3)),
        "poisson-d7" => poisson(7, 4, 35, 20_000, r(1.3e-4, 8.0e-2)),
        "helmholtz-d3" => helmholtz(3, 2, 40, 5000, r(8.0e-5, 4.0e-5)),
        "helmholtz-d5" => helmholtz(5, 3, 50, 10_000, r(1.3e-4, 1.5e-2)),
        "schrodinger-d5" => schrodinger(5, 3, 50, 20_000, Reported { lambda: Some(11.8345), baseline_lambda: Some(11.8645), ..Reported::default() }),
        "schrodinger-d10" => schrodinger(10, 5, 25, 50_000, Reported { lambda: Some(24.1728), baseline_lambda: Some(23.2659), ..Reported::default() }),
        other => {
            let wave = other
                .strip_prefix("helmholtz-k")
                .and_then(|s| s.strip_suffix("pi"))
                .and_then(|m| m.parse::<u32>().ok())
                .filter(|m| [3, 5, 10, 15, 20, 25].contains(m));
            match wave {
                Some(m) => helmholtz_wave(m),
                None => return Err(Error::UnknownProblem(other.to_string())),
            }
        }
    };
    Ok(spec)
}

/// One line per built-in: `name (r=…, h=…)`.
pub fn list_problems() -> Vec<String> {
    BUILTIN_NAMES
        .iter()
        .map(|n| {
            let s = builtin(n).expect("builtin resolves");
            format!("{n} (r={}, h={})", s.rank, s.hidden)
        })
        .collect()
}

impl ProblemSpec {
    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        let d = self.dim();
        if self.rank == 0 {
            return Err(Error::invalid("ranks: inner rank must be positive"));
        }
        if self.hidden == 0 {
            return Err(Error::invalid("hidden: width must be positive"));
        }
        if self.quad.n_sub.iter().chain(&self.quad.n_pts).any(|&n| n == 0) {
            return Err(Error::invalid("quadrature: subinterval and point counts must be positive"));
        }
        for (name, f) in [("b", &self.b), ("f", &self.f), ("potential", &self.potential)] {
            f.validate()?;
            if f.dim().is_some_and(|fd| fd != d) {
                return Err(Error::shape(format!("{name}: field dimension differs from the domain's {d}")));
            }
        }
        match self.kind {
            ProblemKind::Elliptic => {
                if let BoundaryTreatment::Soft { beta, spacing, .. } = &self.boundary {
                    if !(*beta > 0.0) || !(*spacing > 0.0) {
                        return Err(Error::invalid("boundary: soft treatment needs beta > 0 and spacing > 0"));
                    }
                }
            }
            ProblemKind::Eigenvalue => {
                if self.boundary != BoundaryTreatment::Hard {
                    return Err(Error::UnsupportedProblem("eigenvalue problems need hard boundary factors".into()));
                }
            }
            ProblemKind::SupervisedApprox => {
                if self.exact.is_none() || self.samples == 0 {
                    return Err(Error::invalid("supervised approximation needs a target and samples > 0"));
                }
            }
        }
        Ok(())
    }

    pub fn operator(&self) -> EllipticOperator {
        EllipticOperator { c1: self.c1, b: self.b.clone(), f: self.f.clone() }
    }

    pub fn model_shape(&self) -> ModelShape<f64> {
        let bounds = self.domain.bounding();
        let boundaries = match self.boundary {
            BoundaryTreatment::Hard => bounds.into_iter().map(Some).collect(),
            BoundaryTreatment::Soft { .. } => vec![None; self.dim()],
        };
        ModelShape::uniform(self.dim(), self.rank, self.hidden, boundaries)
    }

    pub fn init_model(&self, seed: u64) -> Result<FttModel<f64>> {
        FttModel::new(&self.model_shape(), InitScheme::GlorotUniform, seed)
    }

    fn volume(&self) -> Result<Vec<Vec<crate::quadrature::Rule1D<f64>>>> {
        volume_rules(&self.domain, &self.quad)
    }

    /// The training objective. Supervised problems draw their data set from `seed`.
    pub fn objective(&self, seed: u64) -> Result<Box<dyn Objective<f64>>> {
        self.validate()?;
        let d = self.dim();
        Ok(match self.kind {
            ProblemKind::Elliptic => {
                let mut obj = WeightedSum::single(residual_functional(&self.operator(), d, self.volume()?)?);
                if let BoundaryTreatment::Soft { beta, g, spacing } = &self.boundary {
                    obj = obj.with(*beta, boundary_functional(&self.domain, *spacing, g)?);
                }
                Box::new(obj)
            }
            ProblemKind::Eigenvalue => Box::new(RayleighQuotient(energy_functionals(&self.potential, d, self.volume()?)?)),
            ProblemKind::SupervisedApprox => {
                let (pts, ys) = supervised_dataset(self, self.samples, seed)?;
                Box::new(Supervised::new(&pts, ys)?)
            }
        })
    }

    /// `∫ (L u − f)²` over the volume rules.
    pub fn residual_loss(&self, model: &FttModel<f64>) -> Result<f64> {
        residual_functional(&self.operator(), self.dim(), self.volume()?)?.evaluate(model)
    }

    /// Unweighted `∫_{∂Ω} u²`-type boundary mismatch; hard problems use a 1/10 midpoint rule.
    pub fn boundary_loss(&self, model: &FttModel<f64>) -> Result<f64> {
        let (g, spacing) = match &self.boundary {
            BoundaryTreatment::Soft { g, spacing, .. } => (g.clone(), *spacing),
            BoundaryTreatment::Hard => (SeparableField::zero(), 0.1),
        };
        boundary_functional(&self.domain, spacing, &g)?.evaluate(model)
    }
}

/// `∫ (L u_exact − f)²`, integrated exactly term by term over the problem's
/// quadrature. Catches transcription errors in `f`.
pub fn exact_residual_check(spec: &ProblemSpec) -> Result<f64> {
    if spec.kind != ProblemKind::Elliptic {
        return Err(Error::invalid(format!("{} is not an elliptic problem", spec.name)));
    }
    let Some(Target::Separable(u)) = &spec.exact else {
        return Err(Error::invalid(format!("{} has no separable exact solution", spec.name)));
    };
    let d = spec.dim();
    let mut terms: Vec<SepTerm> = u.laplacian().terms.iter().map(|t| SepTerm::field_term(t, -spec.c1, TermKind::Field)).collect();
    for bt in &spec.b.terms {
        for ut in &u.terms {
            let mut t = SepTerm::field_term(ut, bt.coeff, TermKind::Field);
            for (slot, g) in t.field.iter_mut().zip(&bt.factors) {
                slot.push(g.clone());
            }
            terms.push(t);
        }
    }
    terms.extend(spec.f.terms.iter().map(|t| SepTerm::field_term(t, -1.0, TermKind::Field)));
    debug_assert!(terms.iter().all(|t| t.dim() == d));
    field_square_integral(&terms, volume_rules(&spec.domain, &spec.quad)?)
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (a + b)];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Grid axes of a tensor evaluation grid over the bounding box.
fn grid_axes(spec: &ProblemSpec, n: usize) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::invalid("evaluation grid needs n > 0"));
    }
    let d = spec.dim();
    if n.checked_pow(d as u32).filter(|&t| t <= crate::fttmodel::MAX_GRID_POINTS).is_none() {
        return Err(Error::Resource(format!("{n}^{d} evaluation points")));
    }
    Ok(spec.domain.bounding().iter().map(|iv| linspace(iv.a, iv.b, n)).collect())
}

/// Calls `f` on every point of the tensor grid, last index fastest.
fn for_each_grid_point(axes: &[Vec<f64>], mut f: impl FnMut(&[f64])) {
    let d = axes.len();
    let total: usize = axes.iter().map(Vec::len).product();
    let mut p = vec![0.0; d];
    for mut idx in 0..total {
        for k in (0..d).rev() {
            let n = axes[k].len();
            p[k] = axes[k][idx % n];
            idx /= n;
        }
        f(&p);
    }
}

/// Points of the evaluation set that lie in the domain.
pub fn eval_points(spec: &ProblemSpec, eval: EvalSpec) -> Result<Vec<Vec<f64>>> {
    match eval {
        EvalSpec::TensorGrid { n } => {
            let axes = grid_axes(spec, n)?;
            let mut out = Vec::new();
            for_each_grid_point(&axes, |p| {
                if spec.domain.contains(p) {
                    out.push(p.to_vec());
                }
            });
            Ok(out)
        }
        EvalSpec::RandomUniform { n, seed } => {
            if n == 0 {
                return Err(Error::invalid("evaluation sample needs n > 0"));
            }
            let bounds = spec.domain.bounding();
            let mut rng = rng_for(seed, stream::EVAL, 0);
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let p: Vec<f64> = bounds.iter().map(|iv| rng.gen_range(iv.a..iv.b)).collect();
                if spec.domain.contains(&p) {
                    out.push(p);
                }
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone)]
enum EvalPoints {
    /// Tensor grid plus the mask of grid points inside the domain.
    Grid { axes: Vec<Vec<f64>>, inside: Vec<bool> },
    Scattered(Vec<Vec<f64>>),
}

/// An evaluation set with the exact solution tabulated on it, so repeated
/// error measurements during training only evaluate the model.
#[derive(Debug, Clone)]
pub struct EvalSet {
    points: EvalPoints,
    exact: Vec<f64>,
    exact_norm: f64,
}

impl EvalSet {
    pub fn new(spec: &ProblemSpec, eval: EvalSpec) -> Result<Self> {
        let target = spec
            .exact
            .as_ref()
            .ok_or_else(|| Error::UndefinedMetric(format!("{} has no exact solution", spec.name)))?;
        let mut exact = Vec::new();
        let points = match eval {
            EvalSpec::TensorGrid { n } => {
                let axes = grid_axes(spec, n)?;
                let mut inside = Vec::new();
                for_each_grid_point(&axes, |p| {
                    let ok = spec.domain.contains(p);
                    inside.push(ok);
                    if ok {
                        exact.push(target.eval(p));
                    }
                });
                EvalPoints::Grid { axes, inside }
            }
            EvalSpec::RandomUniform { .. } => {
                let pts = eval_points(spec, eval)?;
                exact = pts.iter().map(|p| target.eval(p)).collect();
                EvalPoints::Scattered(pts)
            }
        };
        let exact_norm = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(exact_norm >= 1e-14) {
            return Err(Error::UndefinedMetric("exact solution has vanishing norm on the evaluation set".into()));
        }
        Ok(Self { points, exact, exact_norm })
    }

    pub fn len(&self) -> usize {
        self.exact.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exact.is_empty()
    }

    /// `‖u_θ − u‖₂ / ‖u‖₂`.
    pub fn relative_error(&self, model: &FttModel<f64>) -> Result<f64> {
        let vals = match &self.points {
            EvalPoints::Grid { axes, inside } => {
                let all = model.eval_grid(axes)?;
                all.into_iter().zip(inside).filter(|(_, &ok)| ok).map(|(v, _)| v).collect()
            }
            EvalPoints::Scattered(pts) => model.eval_batch(pts)?,
        };
        let err: f64 = vals.iter().zip(&self.exact).map(|(v, e)| (v - e) * (v - e)).sum();
        Ok(err.sqrt() / self.exact_norm)
    }

    /// Relative error of an arbitrary pointwise evaluator.
    pub fn relative_error_of(&self, u: &dyn Fn(&[f64]) -> f64) -> f64 {
        let mut err = 0.0;
        let mut k = 0;
        let mut visit = |p: &[f64]| {
            let e = u(p) - self.exact[k];
            err += e * e;
            k += 1;
        };
        match &self.points {
            EvalPoints::Grid { axes, inside } => {
                let mut idx = 0;
                for_each_grid_point(axes, |p| {
                    if inside[idx] {
                        visit(p);
                    }
                    idx += 1;
                });
            }
            EvalPoints::Scattered(pts) => pts.iter().for_each(|p| visit(p)),
        }
        err.sqrt() / self.exact_norm
    }
}

/// `‖u_θ − u‖₂ / ‖u‖₂` over the evaluation set.
pub fn relative_error(model: &FttModel<f64>, spec: &ProblemSpec, eval: EvalSpec) -> Result<f64> {
    EvalSet::new(spec, eval)?.relative_error(model)
}

/// `(∫|∇u|² + ∫V u²) / ∫u²`.
pub fn rayleigh(model: &FttModel<f64>, spec: &ProblemSpec) -> Result<f64> {
    if spec.kind != ProblemKind::Eigenvalue {
        return Err(Error::invalid(format!("{} is not an eigenvalue problem", spec.name)));
    }
    RayleighQuotient(energy_functionals(&spec.potential, spec.dim(), spec.volume()?)?).value(model)
}

/// Uniform samples of the target, drawn from the data stream of `seed`.
pub fn supervised_dataset(spec: &ProblemSpec, n: usize, seed: u64) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let target = spec.exact.as_ref().ok_or_else(|| Error::invalid("supervised data needs a target"))?;
    if n == 0 {
        return Err(Error::invalid("empty data set"));
    }
    let mut rng = rng_for(seed, stream::DATA, 0);
    let bounds = spec.domain.bounding();
    let mut pts = Vec::with_capacity(n);
    while pts.len() < n {
        let p: Vec<f64> = bounds.iter().map(|iv| rng.gen_range(iv.a..=iv.b)).collect();
        if spec.domain.contains(&p) {
            pts.push(p);
        }
    }
    let ys = pts.iter().map(|p| target.eval(p)).collect();
    Ok((pts, ys))
}

/// Mean squared error of the model on a data set.
pub fn supervised_loss(model: &FttModel<f64>, points: &[Vec<f64>], labels: &[f64]) -> Result<f64> {
    Supervised::new(points, labels.to_vec())?.value(model)
}

/// First eigenvalue of `−Δ + Σ_i v(x_i)` on a box where the potential is a sum
/// of identical one-dimensional terms: `d` times the 1-D eigenvalue, computed by
/// a Galerkin method on the Dirichlet sine basis.
pub fn reference_eigenvalue(spec: &ProblemSpec, basis: usize) -> Result<f64> {
    if spec.kind != ProblemKind::Eigenvalue {
        return Err(Error::invalid("not an eigenvalue problem"));
    }
    let d = spec.dim();
    let iv = spec.domain.bounding()[0];
    if spec.domain.boxes.len() != 1 || spec.domain.bounding().iter().any(|b| *b != iv) {
        return Err(Error::UnsupportedProblem("reference eigenvalue needs a cube".into()));
    }
    // Split V into per-dimension univariate parts.
    let mut parts: Vec<Vec<(f64, Factor)>> = vec![Vec::new(); d];
    for t in &spec.potential.terms {
        let active: Vec<usize> = (0..d).filter(|&i| t.factors[i].as_constant().is_none()).collect();
        let konst: f64 = t.factors.iter().filter_map(|f| f.as_constant()).product();
        match active.as_slice() {
            [i] => parts[*i].push((t.coeff * konst, t.factors[*i].clone())),
            [] => parts[0].push((t.coeff * konst, Factor::Const(1.0))),
            _ => return Err(Error::UnsupportedProblem("potential couples dimensions".into())),
        }
    }
    let len = iv.length();
    let gl = gauss_legendre::<f64>(200)?;
    let nodes: Vec<f64> = gl.nodes.iter().map(|&t| iv.a + 0.5 * len * (t + 1.0)).collect();
    let weights: Vec<f64> = gl.weights.iter().map(|&w| 0.5 * len * w).collect();
    let phi = |n: usize, x: f64| (2.0 / len).sqrt() * (n as f64 * PI * (x - iv.a) / len).sin();
    let mut total = 0.0;
    for part in &parts {
        let mut h = DMatrix::<f64>::zeros(basis, basis);
        for m in 0..basis {
            for n in 0..=m {
                let v: f64 = nodes
                    .iter()
                    .zip(&weights)
                    .map(|(&x, &w)| {
                        let pot: f64 = part.iter().map(|(c, f)| c * f.eval(x)).sum();
                        w * pot * phi(m + 1, x) * phi(n + 1, x)
                    })
                    .sum();
                h[(m, n)] = v;
                h[(n, m)] = v;
            }
            h[(m, m)] += ((m + 1) as f64 * PI / len).powi(2);
        }
        let eig = SymmetricEigen::new(h);
        total += eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    }
    Ok(total)
}

/// Trains a model on a problem with the problem's schedule (or `schedule`), logging
/// the relative error when an exact solution is known.
pub fn train_problem(
    spec: &ProblemSpec,
    model: &mut FttModel<f64>,
    schedule: &Schedule,
    eval: EvalSpec,
) -> std::result::Result<TrainLog, TrainFailure> {
    let wrap = |e: Error| TrainFailure { error: e, log: TrainLog::default() };
    let objective = spec.objective(schedule.seed).map_err(wrap)?;
    let set = match &spec.exact {
        Some(_) => Some(EvalSet::new(spec, eval).map_err(wrap)?),
        None => None,
    };
    let monitor = |m: &FttModel<f64>| -> Option<f64> { set.as_ref()?.relative_error(m).ok() };
    train(model, objective.as_ref(), schedule, Some(&monitor))
}

/// One rung of a continuation ladder.
#[derive(Debug, Clone)]
pub struct Rung {
    pub name: String,
    /// Index of the rung whose trained model initialized this one.
    pub init_from: Option<usize>,
    pub rel_error: f64,
    pub log: TrainLog,
    pub model: FttModel<f64>,
}

/// The wave-number ladder: 3π from scratch, then each rung from the previous,
/// except 25π which starts from 15π.
pub fn default_ladder() -> Vec<(ProblemSpec, Option<usize>)> {
    vec![
        (helmholtz_wave(3), None),
        (helmholtz_wave(5), Some(0)),
        (helmholtz_wave(10), Some(1)),
        (helmholtz_wave(15), Some(2)),
        (helmholtz_wave(20), Some(3)),
        (helmholtz_wave(25), Some(3)),
    ]
}

/// Trains each spec in turn, initializing from the named earlier rung's final model.
pub fn continuation_train(ladder: &[(ProblemSpec, Option<usize>)], seed: u64, eval: EvalSpec) -> Result<Vec<Rung>> {
    let mut rungs: Vec<Rung> = Vec::with_capacity(ladder.len());
    for (idx, (spec, from)) in ladder.iter().enumerate() {
        let mut model = match from {
            None => spec.init_model(seed)?,
            Some(j) => {
                let prev = rungs.get(*j).ok_or_else(|| Error::invalid(format!("rung {idx} starts from later rung {j}")))?;
                if prev.model.shape() != spec.model_shape() {
                    return Err(Error::shape(format!("{} and {} have different model shapes", prev.name, spec.name)));
                }
                prev.model.clone()
            }
        };
        let mut schedule = spec.schedule.clone();
        schedule.seed = seed;
        let log = train_problem(spec, &mut model, &schedule, eval)?;
        let rel_error = relative_error(&model, spec, eval)?;
        log::info!("{}: relative error {rel_error:.3e}", spec.name);
        rungs.push(Rung { name: spec.name.clone(), init_from: *from, rel_error, log, model });
    }
    Ok(rungs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corenet::CoreNetwork;

    /// Cores `sin(freq·x + phase) · scale`, 1×1 each.
    fn separable_model(parts: &[(f64, f64, f64)]) -> FttModel<f64> {
        let cores = parts
            .iter()
            .map(|&(freq, phase, scale)| {
                let mut c = CoreNetwork::zeros(1, 1, 1, None).unwrap();
                c.w1[0] = freq;
                c.b1[0] = phase;
                c.w2[0] = scale;
                c
            })
            .collect();
        FttModel::from_cores(cores).unwrap()
    }

    #[test]
    fn every_builtin_resolves_and_validates() {
        for n in BUILTIN_NAMES {
            let s = builtin(n).unwrap();
            assert_eq!(&s.name, n);
            s.validate().unwrap();
        }
        assert!(matches!(builtin("poisson-d4"), Err(Error::UnknownProblem(_))));
        assert!(matches!(builtin("helmholtz-k7pi"), Err(Error::UnknownProblem(_))));
    }

    #[test]
    fn table_settings() {
        let p = builtin("poisson-d3").unwrap();
        assert_eq!((p.rank, p.hidden), (2, 50));
        assert_eq!(p.quad, QuadSpec::uniform(3, 30, 30));
        assert_eq!(builtin("poisson-d7").unwrap().hidden, 35);
        let h = builtin("helmholtz-d3").unwrap();
        assert_eq!((h.rank, h.hidden), (2, 40));
        assert!((h.f.terms[0].coeff - (4.0 * PI * PI * 3.0 - 1.0)).abs() < 1e-12);
        assert_eq!(builtin("schrodinger-d5").unwrap().exact_lambda, Some(11.8345));
        assert_eq!(builtin("helmholtz-k25pi").unwrap().schedule, Schedule::new(3000, 3e-3, 2000, 0.1));
        assert!(list_problems().contains(&"schrodinger-d10 (r=5, h=25)".to_string()));
    }

    #[test]
    fn exact_solutions_satisfy_their_equations() {
        for n in BUILTIN_NAMES.iter().filter(|n| n.starts_with("poisson") || n.starts_with("helmholtz")) {
            let s = builtin(n).unwrap();
            let r = exact_residual_check(&s).unwrap();
            assert!(r <= 1e-8, "{n}: {r}");
        }
    }

    #[test]
    fn corrupted_source_is_detected() {
        let mut s = builtin("poisson-d3").unwrap();
        s.f = s.f.scaled(1.01);
        assert!(exact_residual_check(&s).unwrap() >= 1e-4);
        let mut s = builtin("poisson-lshape").unwrap();
        s.f = s.f.scaled(1.01);
        assert!(exact_residual_check(&s).unwrap() >= 1e-4);
    }

    #[test]
    fn relative_error_detects_scale() {
        let s = builtin("helmholtz-d3").unwrap();
        let eval = EvalSpec::TensorGrid { n: 21 };
        for (alpha, want) in [(1.0, 0.0), (0.0, 1.0), (0.5, 0.5), (2.0, 1.0)] {
            let scale = if alpha == 0.0 { 0.0 } else { alpha };
            let m = separable_model(&[(2.0 * PI, 0.0, scale), (2.0 * PI, 0.0, 1.0), (2.0 * PI, 0.0, 1.0)]);
            let e = relative_error(&m, &s, eval).unwrap();
            assert!((e - want).abs() < 1e-10, "alpha {alpha}: {e}");
        }
    }

    #[test]
    fn relative_error_needs_nonzero_exact() {
        let mut s = builtin("helmholtz-d3").unwrap();
        s.exact = Some(Target::Separable(SeparableField::zero()));
        let m = s.init_model(0).unwrap();
        assert!(matches!(relative_error(&m, &s, EvalSpec::TensorGrid { n: 5 }), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn lshape_evaluation_excludes_the_notch() {
        let s = builtin("poisson-lshape").unwrap();
        let pts = eval_points(&s, EvalSpec::TensorGrid { n: 21 }).unwrap();
        assert!(pts.iter().all(|p| !(p[0] > 0.0 && p[1] < 0.0)));
        // 21³ grid minus the open quarter (10 × 10 × 21 points strictly inside x₁ > 0, x₂ < 0).
        assert_eq!(pts.len(), 21 * 21 * 21 - 10 * 10 * 21);
    }

    #[test]
    fn helmholtz_truth_has_zero_residual_and_error() {
        let s = builtin("helmholtz-d3").unwrap();
        let m = separable_model(&[(2.0 * PI, 0.0, 1.0); 3]);
        assert!(s.residual_loss(&m).unwrap() <= 1e-8);
        assert!(relative_error(&m, &s, EvalSpec::default_for(3)).unwrap() <= 1e-8);
    }

    #[test]
    fn box_eigenfunction_rayleigh() {
        let mut s = builtin("schrodinger-d5").unwrap();
        s.potential = SeparableField::zero();
        s.quad = QuadSpec::uniform(5, 4, 10);
        let m = separable_model(&[(PI / 2.0, PI / 2.0, 1.0); 5]);
        assert!((rayleigh(&m, &s).unwrap() - 5.0 * PI * PI / 4.0).abs() < 1e-6);
    }

    #[test]
    fn reference_eigenvalues_match_tables() {
        let l5 = reference_eigenvalue(&builtin("schrodinger-d5").unwrap(), 40).unwrap();
        let l10 = reference_eigenvalue(&builtin("schrodinger-d10").unwrap(), 40).unwrap();
        assert!((l5 - 11.8345).abs() < 1e-4, "{l5}");
        assert!((l10 - 24.1728).abs() < 1e-4, "{l10}");
    }

    #[test]
    fn hard_and_soft_boundary_losses() {
        let s = builtin("poisson-d3").unwrap();
        assert_eq!(s.boundary_loss(&s.init_model(1).unwrap()).unwrap(), 0.0);
        let l = builtin("poisson-lshape").unwrap();
        let v = l.boundary_loss(&l.init_model(1).unwrap()).unwrap();
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn supervised_loss_of_generating_function() {
        let mut s = builtin("singular-approx-d4").unwrap();
        let f = field(vec![term(1.0, vec![Factor::sin(1.0), Factor::cos(2.0), Factor::Const(1.0), Factor::Exp { amp: 1.0, rate: 0.5 }])]);
        s.exact = Some(Target::Separable(f));
        let (pts, ys) = supervised_dataset(&s, 50, 3).unwrap();
        // The exact model for the target: sin(x), sin(2x + π/2), 1, and exp via a
        // constant-times-sine is not exact, so use the first three cores only.
        let m = separable_model(&[(1.0, 0.0, 1.0), (2.0, PI / 2.0, 1.0)]);
        let pts2: Vec<Vec<f64>> = pts.iter().map(|p| p[..2].to_vec()).collect();
        let ys2: Vec<f64> = pts2.iter().map(|p| p[0].sin() * (2.0 * p[1]).cos()).collect();
        assert!(supervised_loss(&m, &pts2, &ys2).unwrap() < 1e-28);
        assert_eq!(pts.len(), ys.len());

        let mut c = CoreNetwork::zeros(1, 1, 2, None).unwrap();
        c.b2[0] = 0.7;
        let m = FttModel::from_cores(vec![c]).unwrap();
        assert_eq!(supervised_loss(&m, &[vec![0.1], vec![0.4]], &[0.7, 0.7]).unwrap(), 0.0);
        assert!(supervised_loss(&m, &[], &[]).is_err());
    }

    #[test]
    fn continuation_rejects_mismatched_shapes() {
        let mut a = helmholtz_wave(3);
        a.schedule = Schedule::new(1, 1e-3, 0, 0.1);
        let mut b = helmholtz_wave(5);
        b.rank = 3;
        b.schedule = a.schedule.clone();
        a.quad = QuadSpec::uniform(3, 2, 4);
        b.quad = a.quad.clone();
        let err = continuation_train(&[(a, None), (b, Some(0))], 0, EvalSpec::TensorGrid { n: 5 }).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }
}
