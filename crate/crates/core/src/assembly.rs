//! Exact tensor-train assembly of loss integrals.
//!
//! Every integrand handled here is a sum of *monomials*: a coefficient times a
//! product over dimensions of univariate pieces, where the piece in dimension
//! `i` is a Kronecker product of zero, one or two evaluations of core `u_i` (each
//! with its own derivative order) scaled by closed-form field factors. Over a
//! tensor-product rule the integral of such a monomial is
//!
//! ```text
//! coeff · D₁ D₂ ⋯ D_d,   D_i = Σ_k w_{i,k} g_i(x_{i,k}) (A(x_{i,k}) ⊗ B(x_{i,k}))
//! ```
//!
//! which is a chain of small matrices (`r_{i−1}^p × r_i^p` for degree `p`) and
//! collapses to a scalar because `r₀ = r_d = 1`. Residual, energy and boundary
//! losses are all built this way; domains that are unions of boxes contribute
//! one rule per box, and box faces contribute degenerate rules with a single
//! node in the fixed coordinate.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corenet::CoreSamples;
use crate::fttmodel::FttModel;
use crate::linalg::{kron_into, vec_mat, Mat};
use crate::quadrature::{composite_grid, Interval, Rule1D};
use crate::{lit, Error, Result, Scalar};

// ---------------------------------------------------------------------------
// Closed-form univariate factors and separable fields
// ---------------------------------------------------------------------------

/// A univariate closed-form function. The set is closed under differentiation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Factor {
    Const(f64),
    /// `amp · sin(freq·x + phase)`
    Sin { amp: f64, freq: f64, phase: f64 },
    /// `amp · cos(freq·x + phase)`
    Cos { amp: f64, freq: f64, phase: f64 },
    /// `amp · exp(rate·x)`
    Exp { amp: f64, rate: f64 },
    /// `Σ c_j x^j`, lowest degree first.
    Poly(Vec<f64>),
}

impl Factor {
    pub fn sin(freq: f64) -> Self {
        Factor::Sin { amp: 1.0, freq, phase: 0.0 }
    }

    pub fn cos(freq: f64) -> Self {
        Factor::Cos { amp: 1.0, freq, phase: 0.0 }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Factor::Const(c) => *c,
            Factor::Sin { amp, freq, phase } => amp * (freq * x + phase).sin(),
            Factor::Cos { amp, freq, phase } => amp * (freq * x + phase).cos(),
            Factor::Exp { amp, rate } => amp * (rate * x).exp(),
            Factor::Poly(c) => c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci),
        }
    }

    pub fn derivative(&self) -> Factor {
        match self {
            Factor::Const(_) => Factor::Const(0.0),
            Factor::Sin { amp, freq, phase } => Factor::Cos { amp: amp * freq, freq: *freq, phase: *phase },
            Factor::Cos { amp, freq, phase } => Factor::Sin { amp: -amp * freq, freq: *freq, phase: *phase },
            Factor::Exp { amp, rate } => Factor::Exp { amp: amp * rate, rate: *rate },
            Factor::Poly(c) => {
                if c.len() <= 1 {
                    Factor::Const(0.0)
                } else {
                    Factor::Poly(c.iter().enumerate().skip(1).map(|(j, &cj)| j as f64 * cj).collect())
                }
            }
        }
    }

    pub fn nth_derivative(&self, order: usize) -> Factor {
        (0..order).fold(self.clone(), |f, _| f.derivative())
    }

    /// `Some(c)` when the factor is the constant `c`.
    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Factor::Const(c) => Some(*c),
            Factor::Poly(c) if c.len() <= 1 => Some(c.first().copied().unwrap_or(0.0)),
            Factor::Sin { amp, .. } | Factor::Cos { amp, .. } | Factor::Exp { amp, .. } if *amp == 0.0 => Some(0.0),
            Factor::Sin { freq, phase, amp } if *freq == 0.0 => Some(amp * phase.sin()),
            Factor::Cos { freq, phase, amp } if *freq == 0.0 => Some(amp * phase.cos()),
            Factor::Exp { rate, amp } if *rate == 0.0 => Some(*amp),
            _ => None,
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Const(c) => write!(f, "const({c:?})"),
            Factor::Sin { amp, freq, phase } => write!(f, "{amp:?}*sin({freq:?}, {phase:?})"),
            Factor::Cos { amp, freq, phase } => write!(f, "{amp:?}*cos({freq:?}, {phase:?})"),
            Factor::Exp { amp, rate } => write!(f, "{amp:?}*exp({rate:?})"),
            Factor::Poly(c) => {
                write!(f, "poly(")?;
                for (i, v) in c.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{v:?}")?;
                }
                write!(f, ")")
            }
        }
    }
}

/// Parses a number that may involve π: `1.5`, `pi`, `-2pi`, `3*pi`, `pi/2`, `8*pi*pi`, `pi^2/4`.
///
/// The grammar is a product of factors with an optional single divisor; each factor is a
/// literal, `pi`, `<literal>pi`, or `pi^<integer>`.
pub fn parse_number(s: &str) -> Result<f64> {
    let s = s.trim();
    let bad = || Error::invalid(format!("cannot parse number `{s}`"));
    let lower = s.to_ascii_lowercase();
    let (num, den) = match lower.split_once('/') {
        Some((n, d)) => (n, Some(d)),
        None => (lower.as_str(), None),
    };
    let factor = |t: &str| -> Result<f64> {
        let t = t.trim();
        if let Ok(v) = t.parse::<f64>() {
            return Ok(v);
        }
        let pos = t.find("pi").ok_or_else(bad)?;
        let coef = match t[..pos].trim() {
            "" | "+" => 1.0,
            "-" => -1.0,
            h => h.parse::<f64>().map_err(|_| bad())?,
        };
        let power = match t[pos + 2..].trim() {
            "" => 1,
            rest => rest.strip_prefix('^').ok_or_else(bad)?.trim().parse::<i32>().map_err(|_| bad())?,
        };
        Ok(coef * std::f64::consts::PI.powi(power))
    };
    let product = |part: &str| -> Result<f64> {
        if part.trim().is_empty() {
            return Err(bad());
        }
        part.split('*').map(factor).product()
    };
    let value = product(num)?;
    match den {
        Some(d) => Ok(value / product(d)?),
        None => Ok(value),
    }
}

impl FromStr for Factor {
    type Err = Error;

    /// Whitelisted factor syntax: `const(c)`, `[amp*]sin(freq[, phase])`,
    /// `[amp*]cos(freq[, phase])`, `[amp*]exp(rate)`, `poly(c0, c1, …)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = |why: &str| Error::invalid(format!("factor `{s}`: {why}"));
        let open = s.find('(').ok_or_else(|| bad("expected `name(args)`"))?;
        if !s.ends_with(')') {
            return Err(bad("missing closing parenthesis"));
        }
        let head = &s[..open];
        let args_src = &s[open + 1..s.len() - 1];
        let (amp, name) = match head.rfind('*') {
            Some(p) => (parse_number(&head[..p])?, head[p + 1..].trim()),
            None => (1.0, head.trim()),
        };
        let args: Vec<f64> = if args_src.trim().is_empty() {
            Vec::new()
        } else {
            args_src.split(',').map(parse_number).collect::<Result<_>>()?
        };
        let arity = |lo: usize, hi: usize| {
            if args.len() < lo || args.len() > hi {
                Err(bad(&format!("expected {lo}..={hi} arguments, got {}", args.len())))
            } else {
                Ok(())
            }
        };
        match name.to_ascii_lowercase().as_str() {
            "const" => {
                arity(1, 1)?;
                Ok(Factor::Const(amp * args[0]))
            }
            "sin" => {
                arity(1, 2)?;
                Ok(Factor::Sin { amp, freq: args[0], phase: args.get(1).copied().unwrap_or(0.0) })
            }
            "cos" => {
                arity(1, 2)?;
                Ok(Factor::Cos { amp, freq: args[0], phase: args.get(1).copied().unwrap_or(0.0) })
            }
            "exp" => {
                arity(1, 1)?;
                Ok(Factor::Exp { amp, rate: args[0] })
            }
            "poly" => {
                arity(1, usize::MAX)?;
                Ok(Factor::Poly(args.iter().map(|c| amp * c).collect()))
            }
            other => Err(bad(&format!("`{other}` is not one of const, sin, cos, exp, poly"))),
        }
    }
}

/// One separable term `coeff · g₁(x₁) ⋯ g_d(x_d)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldTerm {
    pub coeff: f64,
    pub factors: Vec<Factor>,
}

impl FieldTerm {
    pub fn new(coeff: f64, factors: Vec<Factor>) -> Self {
        Self { coeff, factors }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.coeff * self.factors.iter().zip(x).map(|(g, &xi)| g.eval(xi)).product::<f64>()
    }
}

/// A sum of separable terms; covers sources, reaction coefficients, potentials
/// and closed-form exact solutions.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SeparableField {
    pub terms: Vec<FieldTerm>,
}

impl SeparableField {
    pub fn new(terms: Vec<FieldTerm>) -> Result<Self> {
        let f = Self { terms };
        f.validate()?;
        Ok(f)
    }

    pub fn zero() -> Self {
        Self { terms: Vec::new() }
    }

    pub fn constant(d: usize, c: f64) -> Self {
        Self { terms: vec![FieldTerm::new(c, vec![Factor::Const(1.0); d])] }
    }

    /// Dimension, or `None` for the empty (zero) field.
    pub fn dim(&self) -> Option<usize> {
        self.terms.first().map(|t| t.factors.len())
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.dim() {
            if self.terms.iter().any(|t| t.factors.len() != d) {
                return Err(Error::shape("every separable term needs one factor per dimension"));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.coeff == 0.0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.eval(x)).sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { terms: self.terms.iter().map(|t| FieldTerm::new(t.coeff * s, t.factors.clone())).collect() }
    }

    /// `∂^order/∂x_k^order` of the field.
    pub fn partial(&self, k: usize, order: usize) -> Self {
        Self {
            terms: self
                .terms
                .iter()
                .map(|t| {
                    let mut factors = t.factors.clone();
                    factors[k] = factors[k].nth_derivative(order);
                    FieldTerm::new(t.coeff, factors)
                })
                .collect(),
        }
    }

    pub fn laplacian(&self) -> Self {
        let d = self.dim().unwrap_or(0);
        Self { terms: (0..d).flat_map(|k| self.partial(k, 2).terms).collect() }
    }
}

// ---------------------------------------------------------------------------
// Domains and rules
// ---------------------------------------------------------------------------

/// A union of pairwise-disjoint axis-aligned boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub boxes: Vec<Vec<Interval<f64>>>,
}

impl Serialize for Interval<f64> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.a, self.b].serialize(s)
    }
}

impl<'de> Deserialize<'de> for Interval<f64> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [a, b] = <[f64; 2]>::deserialize(d)?;
        Interval::new(a, b).map_err(serde::de::Error::custom)
    }
}

/// A `(d−1)`-dimensional piece of the boundary: coordinate `dim` fixed at `value`.
#[derive(Debug, Clone, PartialEq)]
pub struct FacePiece {
    pub dim: usize,
    pub value: f64,
    /// One interval per dimension; the entry at `dim` is ignored.
    pub extent: Vec<Interval<f64>>,
}

impl FacePiece {
    pub fn area(&self) -> f64 {
        self.extent
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != self.dim)
            .map(|(_, iv)| iv.length())
            .product()
    }
}

impl BoxDomain {
    pub fn new(boxes: Vec<Vec<Interval<f64>>>) -> Result<Self> {
        let dom = Self { boxes };
        dom.validate()?;
        Ok(dom)
    }

    pub fn cube(d: usize, a: f64, b: f64) -> Result<Self> {
        Self::new(vec![vec![Interval::new(a, b)?; d]])
    }

    pub fn dim(&self) -> usize {
        self.boxes.first().map_or(0, |b| b.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.is_empty() {
            return Err(Error::invalid("domain needs at least one box"));
        }
        let d = self.dim();
        if d == 0 || self.boxes.iter().any(|b| b.len() != d) {
            return Err(Error::shape("every box needs one interval per dimension"));
        }
        for b in &self.boxes {
            for iv in b {
                Interval::new(iv.a, iv.b)?;
            }
        }
        for i in 0..self.boxes.len() {
            for j in i + 1..self.boxes.len() {
                let overlap = self.boxes[i]
                    .iter()
                    .zip(&self.boxes[j])
                    .all(|(p, q)| p.a.max(q.a) < p.b.min(q.b));
                if overlap {
                    return Err(Error::invalid(format!("boxes {i} and {j} overlap")));
                }
            }
        }
        Ok(())
    }

    pub fn bounding(&self) -> Vec<Interval<f64>> {
        (0..self.dim())
            .map(|k| Interval {
                a: self.boxes.iter().map(|b| b[k].a).fold(f64::INFINITY, f64::min),
                b: self.boxes.iter().map(|b| b[k].b).fold(f64::NEG_INFINITY, f64::max),
            })
            .collect()
    }

    pub fn volume(&self) -> f64 {
        self.boxes.iter().map(|b| b.iter().map(|iv| iv.length()).product::<f64>()).sum()
    }

    /// Membership in the closure of the union.
    pub fn contains(&self, x: &[f64]) -> bool {
        self.boxes.iter().any(|b| b.iter().zip(x).all(|(iv, &xi)| iv.contains_closed(xi)))
    }

    /// Exterior faces of the union. Facets shared by two boxes (matched by exact
    /// coordinate equality) are removed; the rest is split into rectangles.
    pub fn exterior_faces(&self) -> Vec<FacePiece> {
        let d = self.dim();
        let mut out = Vec::new();
        for (bi, bx) in self.boxes.iter().enumerate() {
            for dim in 0..d {
                for upper in [false, true] {
                    let value = if upper { bx[dim].b } else { bx[dim].a };
                    let mut pieces = vec![bx.clone()];
                    for (bj, other) in self.boxes.iter().enumerate() {
                        if bi == bj {
                            continue;
                        }
                        let touches = if upper { other[dim].a == value } else { other[dim].b == value };
                        if !touches {
                            continue;
                        }
                        pieces = pieces
                            .into_iter()
                            .flat_map(|p| subtract_rect(&p, other, dim))
                            .collect();
                    }
                    out.extend(pieces.into_iter().map(|extent| FacePiece { dim, value, extent }));
                }
            }
        }
        out
    }
}

/// `piece \ cutter` over all dimensions except `skip`, as disjoint rectangles.
fn subtract_rect(piece: &[Interval<f64>], cutter: &[Interval<f64>], skip: usize) -> Vec<Vec<Interval<f64>>> {
    let d = piece.len();
    let intersects = (0..d)
        .filter(|&k| k != skip)
        .all(|k| piece[k].a.max(cutter[k].a) < piece[k].b.min(cutter[k].b));
    if !intersects {
        return vec![piece.to_vec()];
    }
    let mut out = Vec::new();
    let mut rest = piece.to_vec();
    for k in (0..d).filter(|&k| k != skip) {
        let (pa, pb) = (rest[k].a, rest[k].b);
        let (ca, cb) = (cutter[k].a.max(pa), cutter[k].b.min(pb));
        if pa < ca {
            let mut below = rest.clone();
            below[k] = Interval { a: pa, b: ca };
            out.push(below);
        }
        if cb < pb {
            let mut above = rest.clone();
            above[k] = Interval { a: cb, b: pb };
            out.push(above);
        }
        rest[k] = Interval { a: ca, b: cb };
    }
    out
}

/// A tensor-product rule: one 1-D rule per dimension.
pub type TensorRule<T> = Vec<Rule1D<T>>;

/// Quadrature resolution for the bounding interval of each dimension. Boxes
/// covering part of that interval get a proportional share of the subintervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadSpec {
    pub n_sub: Vec<usize>,
    pub n_pts: Vec<usize>,
}

impl QuadSpec {
    pub fn uniform(d: usize, n_sub: usize, n_pts: usize) -> Self {
        Self { n_sub: vec![n_sub; d], n_pts: vec![n_pts; d] }
    }
}

pub fn volume_rules<T: Scalar>(domain: &BoxDomain, quad: &QuadSpec) -> Result<Vec<TensorRule<T>>> {
    let d = domain.dim();
    if quad.n_sub.len() != d || quad.n_pts.len() != d {
        return Err(Error::shape(format!("quadrature given for {} dimensions, domain has {d}", quad.n_sub.len())));
    }
    let bound = domain.bounding();
    domain
        .boxes
        .iter()
        .map(|bx| {
            (0..d)
                .map(|k| {
                    let share = bx[k].length() / bound[k].length();
                    let n_sub = ((quad.n_sub[k] as f64 * share).round() as usize).max(1);
                    composite_grid(bx[k].cast::<T>(), n_sub, quad.n_pts[k])
                })
                .collect()
        })
        .collect()
}

/// Midpoint rules with spacing at most `spacing` on every exterior face.
pub fn face_rules<T: Scalar>(domain: &BoxDomain, spacing: f64) -> Result<Vec<TensorRule<T>>> {
    domain
        .exterior_faces()
        .iter()
        .map(|face| {
            (0..domain.dim())
                .map(|k| {
                    if k == face.dim {
                        Ok(Rule1D::point(lit::<T>(face.value)))
                    } else {
                        Rule1D::rectangle(face.extent[k].cast::<T>(), lit(spacing))
                    }
                })
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Monomials and functionals
// ---------------------------------------------------------------------------

/// Provenance of a monomial; used to split the residual into its named parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TermKind {
    /// `y_k`: second derivative in dimension `k`.
    Laplacian(usize),
    /// `∂u/∂x_k`.
    Gradient(usize),
    /// `b_s · u`, the `s`-th separable term of the reaction coefficient.
    Reaction(usize),
    /// `f_t`, the `t`-th separable term of the source (or boundary data).
    Source(usize),
    /// `u` itself.
    Solution,
    /// Pure closed-form field.
    Field,
    None,
}

/// A linear (or constant) separable piece: `coeff · Π_i [u_i^{(o_i)}] · Π_i Π field_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SepTerm {
    pub coeff: f64,
    /// Derivative order of `u_i` per dimension; `None` for a pure field term.
    pub u_orders: Option<Vec<u8>>,
    /// Field factors multiplying dimension `i`.
    pub field: Vec<Vec<Factor>>,
    pub kind: TermKind,
}

impl SepTerm {
    pub fn solution(d: usize, coeff: f64, orders: Vec<u8>, kind: TermKind) -> Self {
        Self { coeff, u_orders: Some(orders), field: vec![Vec::new(); d], kind }
    }

    pub fn field_term(term: &FieldTerm, coeff: f64, kind: TermKind) -> Self {
        Self {
            coeff: coeff * term.coeff,
            u_orders: None,
            field: term.factors.iter().map(|f| vec![f.clone()]).collect(),
            kind,
        }
    }

    pub fn dim(&self) -> usize {
        self.field.len()
    }

    pub fn eval_field(&self, x: &[f64]) -> f64 {
        self.coeff
            * self
                .field
                .iter()
                .zip(x)
                .map(|(fs, &xi)| fs.iter().map(|f| f.eval(xi)).product::<f64>())
                .product::<f64>()
    }
}

/// Per-dimension constituents of a dimension factor (the "factor spec" slice):
/// derivative orders of the core evaluations being Kronecker-multiplied, in
/// order, plus closed-form field factors scaling them.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub orders: Vec<u8>,
    pub field: Vec<Factor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Monomial<T> {
    pub coeff: T,
    pub slots: Vec<Slot>,
    pub kinds: [TermKind; 2],
}

impl<T: Scalar> Monomial<T> {
    pub fn degree(&self) -> usize {
        self.slots.first().map_or(0, |s| s.orders.len())
    }

    /// The product of two linear pieces.
    pub fn product(a: &SepTerm, b: &SepTerm) -> Self {
        let d = a.dim();
        let slots = (0..d)
            .map(|i| {
                let mut orders = Vec::with_capacity(2);
                if let Some(o) = &a.u_orders {
                    orders.push(o[i]);
                }
                if let Some(o) = &b.u_orders {
                    orders.push(o[i]);
                }
                let mut field = a.field[i].clone();
                field.extend(b.field[i].iter().cloned());
                Slot { orders, field }
            })
            .collect();
        Self { coeff: lit(a.coeff * b.coeff), slots, kinds: [a.kind, b.kind] }
    }

    pub fn linear(a: &SepTerm) -> Self {
        let d = a.dim();
        let slots = (0..d)
            .map(|i| Slot {
                orders: a.u_orders.as_ref().map(|o| vec![o[i]]).unwrap_or_default(),
                field: a.field[i].clone(),
            })
            .collect();
        Self { coeff: lit(a.coeff), slots, kinds: [a.kind, TermKind::None] }
    }
}

/// `Σ_a Σ_b term_a · term_b`, i.e. the monomials of `(Σ_a term_a)²`.
pub fn square_of_sum<T: Scalar>(terms: &[SepTerm]) -> Vec<Monomial<T>> {
    let mut out = Vec::with_capacity(terms.len() * terms.len());
    for a in terms {
        for b in terms {
            out.push(Monomial::product(a, b));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct DimKey {
    rule: usize,
    dim: usize,
    orders: Vec<u8>,
    field: Vec<usize>,
}

/// A scalar functional `Σ_monomials Σ_rules coeff · D₁⋯D_d` of the model.
#[derive(Debug, Clone)]
pub struct Functional<T> {
    pub(crate) d: usize,
    pub(crate) rules: Vec<TensorRule<T>>,
    pub(crate) monomials: Vec<Monomial<T>>,
    /// Folded coefficient per monomial (constant field factors absorbed).
    pub(crate) coeffs: Vec<T>,
    pub(crate) keys: Vec<(usize, usize, Vec<u8>)>,
    /// `w_k · Π g(x_k)` per key.
    pub(crate) key_weights: Vec<Vec<T>>,
    /// `[monomial][rule][dim] → key`.
    pub(crate) mono_keys: Vec<Vec<Vec<usize>>>,
    /// `[rule][dim] → highest derivative order required`, if the core is sampled.
    pub(crate) need: Vec<Vec<Option<usize>>>,
}

/// Dimension factor matrices and the core samples they were built from.
pub(crate) struct Forward<T> {
    pub samples: Vec<Vec<Option<CoreSamples<T>>>>,
    pub factors: Vec<Mat<T>>,
}

impl<T: Scalar> Functional<T> {
    pub fn new(d: usize, rules: Vec<TensorRule<T>>, monomials: Vec<Monomial<T>>) -> Result<Self> {
        if rules.iter().any(|r| r.len() != d) {
            return Err(Error::shape(format!("every rule needs {d} one-dimensional rules")));
        }
        let mut table: Vec<Factor> = Vec::new();
        let mut intern = |f: &Factor| -> usize {
            if let Some(p) = table.iter().position(|g| g == f) {
                p
            } else {
                table.push(f.clone());
                table.len() - 1
            }
        };
        let mut coeffs = Vec::with_capacity(monomials.len());
        let mut key_index: HashMap<DimKey, usize> = HashMap::new();
        let mut keys = Vec::new();
        let mut key_weights = Vec::new();
        let mut mono_keys = Vec::with_capacity(monomials.len());
        let mut need = vec![vec![None::<usize>; d]; rules.len()];
        let mut interned: Vec<Vec<Vec<usize>>> = Vec::with_capacity(monomials.len());
        for m in &monomials {
            if m.slots.len() != d {
                return Err(Error::shape(format!("monomial has {} slots for {d} dimensions", m.slots.len())));
            }
            let deg = m.degree();
            if deg > 2 || m.slots.iter().any(|s| s.orders.len() != deg || s.orders.iter().any(|&o| o > 2)) {
                return Err(Error::invalid("monomial slots must share a degree ≤ 2 with orders ≤ 2"));
            }
            let mut c = m.coeff.to_f64().unwrap();
            let mut ids_per_dim = Vec::with_capacity(d);
            for s in &m.slots {
                let mut ids = Vec::new();
                for f in &s.field {
                    match f.as_constant() {
                        Some(k) => c *= k,
                        None => ids.push(intern(f)),
                    }
                }
                ids.sort_unstable();
                ids_per_dim.push(ids);
            }
            coeffs.push(lit::<T>(c));
            interned.push(ids_per_dim);
        }
        for (mi, m) in monomials.iter().enumerate() {
            let mut per_rule = Vec::with_capacity(rules.len());
            for (ri, rule) in rules.iter().enumerate() {
                let mut per_dim = Vec::with_capacity(d);
                for i in 0..d {
                    let key = DimKey { rule: ri, dim: i, orders: m.slots[i].orders.clone(), field: interned[mi][i].clone() };
                    let idx = match key_index.get(&key) {
                        Some(&k) => k,
                        None => {
                            let r1 = &rule[i];
                            let w: Vec<T> = r1
                                .nodes
                                .iter()
                                .zip(&r1.weights)
                                .map(|(&x, &w)| {
                                    let xf = x.to_f64().unwrap();
                                    let g: f64 = key.field.iter().map(|&id| table[id].eval(xf)).product();
                                    w * lit::<T>(g)
                                })
                                .collect();
                            keys.push((ri, i, key.orders.clone()));
                            key_weights.push(w);
                            key_index.insert(key.clone(), keys.len() - 1);
                            keys.len() - 1
                        }
                    };
                    if let Some(&mx) = m.slots[i].orders.iter().max() {
                        let e = &mut need[ri][i];
                        *e = Some(e.map_or(mx as usize, |v: usize| v.max(mx as usize)));
                    }
                    per_dim.push(idx);
                }
                per_rule.push(per_dim);
            }
            mono_keys.push(per_rule);
        }
        Ok(Self { d, rules, monomials, coeffs, keys, key_weights, mono_keys, need })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn monomials(&self) -> &[Monomial<T>] {
        &self.monomials
    }

    pub fn rules(&self) -> &[TensorRule<T>] {
        &self.rules
    }

    pub(crate) fn check_model(&self, model: &FttModel<T>) -> Result<()> {
        if model.dim() != self.d {
            return Err(Error::shape(format!("functional is {}-dimensional, model {}", self.d, model.dim())));
        }
        Ok(())
    }

    pub(crate) fn forward(&self, model: &FttModel<T>) -> Result<Forward<T>> {
        self.check_model(model)?;
        let samples: Vec<Vec<Option<CoreSamples<T>>>> = self
            .rules
            .iter()
            .zip(&self.need)
            .map(|(rule, need)| {
                (0..self.d)
                    .map(|i| need[i].map(|o| model.cores()[i].eval_nodes(&rule[i].nodes, o)))
                    .collect()
            })
            .collect();
        let ranks = model.ranks();
        let factors = self
            .keys
            .iter()
            .zip(&self.key_weights)
            .map(|((ri, i, orders), w)| {
                let (r, c) = (ranks[*i], ranks[*i + 1]);
                build_dim_factor(orders, samples[*ri][*i].as_ref(), w, r, c)
            })
            .collect();
        Ok(Forward { samples, factors })
    }

    /// Value of one monomial over one rule (coefficient excluded).
    pub(crate) fn chain_value(&self, fwd: &Forward<T>, mi: usize, ri: usize) -> T {
        let keys = &self.mono_keys[mi][ri];
        let mut v = vec![T::one()];
        let mut tmp = Vec::new();
        for &k in keys {
            let m = &fwd.factors[k];
            tmp.resize(m.cols(), T::zero());
            vec_mat(&v, m.as_slice(), m.rows(), m.cols(), &mut tmp);
            std::mem::swap(&mut v, &mut tmp);
        }
        v[0]
    }

    /// Per-monomial values (coefficients included, summed over rules).
    pub fn monomial_values(&self, model: &FttModel<T>) -> Result<Vec<T>> {
        let fwd = self.forward(model)?;
        Ok((0..self.monomials.len())
            .map(|mi| {
                (0..self.rules.len())
                    .map(|ri| self.coeffs[mi] * self.chain_value(&fwd, mi, ri))
                    .fold(T::zero(), |a, b| a + b)
            })
            .collect())
    }

    pub fn evaluate(&self, model: &FttModel<T>) -> Result<T> {
        let fwd = self.forward(model)?;
        let v = self.sum_forward(&fwd);
        if !v.is_finite() {
            return Err(self.non_finite_error(&fwd));
        }
        Ok(v)
    }

    pub(crate) fn sum_forward(&self, fwd: &Forward<T>) -> T {
        let mut total = T::zero();
        for mi in 0..self.monomials.len() {
            for ri in 0..self.rules.len() {
                total += self.coeffs[mi] * self.chain_value(fwd, mi, ri);
            }
        }
        total
    }

    pub(crate) fn non_finite_error(&self, fwd: &Forward<T>) -> Error {
        for mi in 0..self.monomials.len() {
            for ri in 0..self.rules.len() {
                if !self.chain_value(fwd, mi, ri).is_finite() {
                    return Error::NumericalFailure {
                        term: format!("monomial {mi} ({:?}) on rule {ri}", self.monomials[mi].kinds),
                        detail: "non-finite value".into(),
                    };
                }
            }
        }
        Error::NumericalFailure { term: "functional".into(), detail: "non-finite value".into() }
    }

    /// Value of a functional whose monomials never touch the model.
    pub fn constant_value(&self) -> Result<T> {
        if self.monomials.iter().any(|m| m.degree() > 0) {
            return Err(Error::invalid("functional depends on the model"));
        }
        let mut total = T::zero();
        for mi in 0..self.monomials.len() {
            for ri in 0..self.rules.len() {
                let p: T = self.mono_keys[mi][ri]
                    .iter()
                    .map(|&k| self.key_weights[k].iter().copied().sum::<T>())
                    .fold(T::one(), |a, b| a * b);
                total += self.coeffs[mi] * p;
            }
        }
        Ok(total)
    }
}

fn build_dim_factor<T: Scalar>(orders: &[u8], samples: Option<&CoreSamples<T>>, w: &[T], r: usize, c: usize) -> Mat<T> {
    match orders.len() {
        0 => Mat::scalar(w.iter().copied().sum()),
        1 => {
            let s = samples.expect("core sampled").order(orders[0] as usize);
            let m = r * c;
            let mut out = Mat::zeros(r, c);
            let data = out.as_mut_slice();
            for (k, &wk) in w.iter().enumerate() {
                if wk == T::zero() {
                    continue;
                }
                for (o, &v) in data.iter_mut().zip(&s[k * m..(k + 1) * m]) {
                    *o += wk * v;
                }
            }
            out
        }
        _ => {
            let smp = samples.expect("core sampled");
            let a = smp.order(orders[0] as usize);
            let b = smp.order(orders[1] as usize);
            let m = r * c;
            let mut out = Mat::zeros(r * r, c * c);
            for (k, &wk) in w.iter().enumerate() {
                if wk == T::zero() {
                    continue;
                }
                kron_into(&a[k * m..(k + 1) * m], (r, c), &b[k * m..(k + 1) * m], (r, c), wk, out.as_mut_slice());
            }
            out
        }
    }
}

/// The dimension factor `Σ_k w_k Π g(x_k) (A⁽¹⁾(x_k) ⊗ A⁽²⁾(x_k))` for one core
/// on one rule; `slot.orders` lists the derivative orders of the constituents.
pub fn dim_factor<T: Scalar>(
    core: &crate::corenet::CoreNetwork<T>,
    slot: &Slot,
    rule: &Rule1D<T>,
) -> Result<Mat<T>> {
    if rule.is_empty() {
        return Err(Error::invalid("empty quadrature rule"));
    }
    if slot.orders.len() > 2 || slot.orders.iter().any(|&o| o > 2) {
        return Err(Error::invalid("at most two constituents with derivative order ≤ 2"));
    }
    let w: Vec<T> = rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .map(|(&x, &w)| {
            let xf = x.to_f64().unwrap();
            w * lit::<T>(slot.field.iter().map(|f| f.eval(xf)).product::<f64>())
        })
        .collect();
    let max_order = slot.orders.iter().copied().max().unwrap_or(0) as usize;
    let samples = core.eval_nodes(&rule.nodes, max_order);
    Ok(build_dim_factor(&slot.orders, Some(&samples), &w, core.rows(), core.cols()))
}

/// `Σ_boxes coeff · Π_i D_i` for a single monomial.
pub fn assemble_term<T: Scalar>(model: &FttModel<T>, monomial: &Monomial<T>, rules: &[TensorRule<T>]) -> Result<T> {
    let f = Functional::new(model.dim(), rules.to_vec(), vec![monomial.clone()])?;
    f.evaluate(model)
}

// ---------------------------------------------------------------------------
// Loss builders
// ---------------------------------------------------------------------------

/// `L u = −c₁ Δu + b(x) u` with right-hand side `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipticOperator {
    pub c1: f64,
    pub b: SeparableField,
    pub f: SeparableField,
}

impl EllipticOperator {
    pub fn check(&self, d: usize) -> Result<()> {
        for (name, fld) in [("b", &self.b), ("f", &self.f)] {
            fld.validate()?;
            if let Some(fd) = fld.dim() {
                if fd != d {
                    return Err(Error::UnsupportedProblem(format!(
                        "field {name} is {fd}-dimensional, problem is {d}-dimensional"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The linear pieces of `L u − f`.
    pub fn residual_terms(&self, d: usize) -> Vec<SepTerm> {
        let mut terms = Vec::new();
        for k in 0..d {
            let mut orders = vec![0u8; d];
            orders[k] = 2;
            terms.push(SepTerm::solution(d, -self.c1, orders, TermKind::Laplacian(k)));
        }
        for (s, bt) in self.b.terms.iter().enumerate() {
            let mut t = SepTerm::field_term(bt, 1.0, TermKind::Reaction(s));
            t.u_orders = Some(vec![0; d]);
            terms.push(t);
        }
        for (t, ft) in self.f.terms.iter().enumerate() {
            terms.push(SepTerm::field_term(ft, -1.0, TermKind::Source(t)));
        }
        terms
    }
}

/// `∫_Ω (L u − f)²` over the given volume rules (all of I₁…I₅ plus `∫f²`).
pub fn residual_functional<T: Scalar>(op: &EllipticOperator, d: usize, rules: Vec<TensorRule<T>>) -> Result<Functional<T>> {
    op.check(d)?;
    Functional::new(d, rules, square_of_sum(&op.residual_terms(d)))
}

/// Named parts of the residual integral.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBreakdown<T> {
    /// `c₁² ∫ y_j y_k` for every ordered pair.
    pub i1_cross: Vec<Vec<T>>,
    pub i1: T,
    pub i2: T,
    pub i3: T,
    pub i4: T,
    pub i5: T,
    /// `∫ f²`, constant in the parameters.
    pub cf: T,
}

impl<T: Scalar> ResidualBreakdown<T> {
    pub fn total(&self) -> T {
        self.i1 + self.i2 + self.i3 + self.i4 + self.i5 + self.cf
    }
}

pub fn residual_breakdown<T: Scalar>(f: &Functional<T>, model: &FttModel<T>) -> Result<ResidualBreakdown<T>> {
    let vals = f.monomial_values(model)?;
    let d = f.dim();
    let z = T::zero();
    let mut out = ResidualBreakdown { i1_cross: vec![vec![z; d]; d], i1: z, i2: z, i3: z, i4: z, i5: z, cf: z };
    for (m, &v) in f.monomials().iter().zip(&vals) {
        use TermKind::*;
        match m.kinds {
            [Laplacian(j), Laplacian(k)] => {
                out.i1_cross[j][k] += v;
                out.i1 += v;
            }
            [Reaction(_), Reaction(_)] => out.i2 += v,
            [Laplacian(_), Reaction(_)] | [Reaction(_), Laplacian(_)] => out.i3 += v,
            [Laplacian(_), Source(_)] | [Source(_), Laplacian(_)] => out.i4 += v,
            [Reaction(_), Source(_)] | [Source(_), Reaction(_)] => out.i5 += v,
            [Source(_), Source(_)] => out.cf += v,
            other => return Err(Error::invalid(format!("monomial {other:?} is not part of a residual"))),
        }
    }
    Ok(out)
}

/// `∫ (u − g)²` over the exterior faces, midpoint rule with the given spacing.
/// The caller multiplies by the penalty weight.
pub fn boundary_functional<T: Scalar>(domain: &BoxDomain, spacing: f64, g: &SeparableField) -> Result<Functional<T>> {
    let d = domain.dim();
    let rules = face_rules(domain, spacing)?;
    let mut terms = vec![SepTerm::solution(d, 1.0, vec![0; d], TermKind::Solution)];
    for (t, gt) in g.terms.iter().enumerate() {
        terms.push(SepTerm::field_term(gt, -1.0, TermKind::Source(t)));
    }
    Functional::new(d, rules, square_of_sum(&terms))
}

/// The three integrals of the Rayleigh quotient.
#[derive(Debug, Clone)]
pub struct EnergyFunctionals<T> {
    /// `∫ ∇u·∇u`
    pub dirichlet: Functional<T>,
    /// `∫ V u²`
    pub potential: Functional<T>,
    /// `∫ u²`
    pub mass: Functional<T>,
}

pub fn energy_functionals<T: Scalar>(potential: &SeparableField, d: usize, rules: Vec<TensorRule<T>>) -> Result<EnergyFunctionals<T>> {
    if let Some(pd) = potential.dim() {
        if pd != d {
            return Err(Error::UnsupportedProblem(format!("potential is {pd}-dimensional, problem {d}")));
        }
    }
    let grad_terms: Vec<Monomial<T>> = (0..d)
        .map(|k| {
            let mut orders = vec![0u8; d];
            orders[k] = 1;
            let t = SepTerm::solution(d, 1.0, orders, TermKind::Gradient(k));
            Monomial::product(&t, &t)
        })
        .collect();
    let u = SepTerm::solution(d, 1.0, vec![0; d], TermKind::Solution);
    let pot_terms: Vec<Monomial<T>> = potential
        .terms
        .iter()
        .enumerate()
        .map(|(t, vt)| {
            let v = SepTerm::field_term(vt, 1.0, TermKind::Reaction(t));
            let mut m = Monomial::product(&u, &u);
            for (slot, fs) in m.slots.iter_mut().zip(&v.field) {
                slot.field.extend(fs.iter().cloned());
            }
            m.coeff = lit(v.coeff);
            m.kinds = [TermKind::Reaction(t), TermKind::Solution];
            m
        })
        .collect();
    Ok(EnergyFunctionals {
        dirichlet: Functional::new(d, rules.clone(), grad_terms)?,
        potential: Functional::new(d, rules.clone(), pot_terms)?,
        mass: Functional::new(d, rules, vec![Monomial::product(&u, &u)])?,
    })
}

/// `(dirichlet, potential, mass)` for the model.
pub fn energy_terms<T: Scalar>(e: &EnergyFunctionals<T>, model: &FttModel<T>) -> Result<(T, T, T)> {
    Ok((e.dirichlet.evaluate(model)?, e.potential.evaluate(model)?, e.mass.evaluate(model)?))
}

/// `∫ (Σ_a term_a)²` for pure field terms (no model involved).
pub fn field_square_integral(terms: &[SepTerm], rules: Vec<TensorRule<f64>>) -> Result<f64> {
    let d = terms.first().map_or(0, |t| t.dim());
    if terms.iter().any(|t| t.u_orders.is_some()) {
        return Err(Error::invalid("field integral given a solution-dependent term"));
    }
    Functional::new(d, rules, square_of_sum::<f64>(terms))?.constant_value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corenet::{CoreNetwork, InitScheme};
    use crate::fttmodel::ModelShape;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn sine_core(freq: f64, rows: usize, cols: usize) -> CoreNetwork<f64> {
        let mut c = CoreNetwork::zeros(rows, cols, 1, None).unwrap();
        c.w1[0] = freq;
        c.w2.iter_mut().for_each(|v| *v = 1.0);
        c
    }

    fn unit_rule(n_sub: usize, n_pts: usize) -> Rule1D<f64> {
        composite_grid(Interval::new(0.0, 1.0).unwrap(), n_sub, n_pts).unwrap()
    }

    #[test]
    fn factor_derivatives() {
        let fs = [
            Factor::Sin { amp: 1.3, freq: 2.0, phase: 0.4 },
            Factor::Cos { amp: -0.7, freq: 3.0, phase: 0.1 },
            Factor::Exp { amp: 2.0, rate: -1.5 },
            Factor::Poly(vec![1.0, -2.0, 0.5, 3.0]),
            Factor::Const(4.0),
        ];
        for f in &fs {
            let d = f.derivative();
            for x in [-0.8, 0.1, 0.9] {
                let h = 1e-6;
                let fd = (f.eval(x + h) - f.eval(x - h)) / (2.0 * h);
                assert!((d.eval(x) - fd).abs() < 1e-7 * (1.0 + fd.abs()), "{f}");
            }
        }
    }

    #[test]
    fn factor_parsing() {
        assert_eq!("sin(2pi)".parse::<Factor>().unwrap(), Factor::sin(2.0 * PI));
        assert_eq!("cos(pi, pi)".parse::<Factor>().unwrap(), Factor::Cos { amp: 1.0, freq: PI, phase: PI });
        assert_eq!("0.5*exp(-1)".parse::<Factor>().unwrap(), Factor::Exp { amp: 0.5, rate: -1.0 });
        assert_eq!("poly(0, 1, 0, -1)".parse::<Factor>().unwrap(), Factor::Poly(vec![0.0, 1.0, 0.0, -1.0]));
        assert_eq!("const(3)".parse::<Factor>().unwrap(), Factor::Const(3.0));
        assert_eq!(parse_number("pi/2").unwrap(), PI / 2.0);
        assert_eq!(parse_number("-3*pi").unwrap(), -3.0 * PI);
        assert_eq!(parse_number("8*pi*pi").unwrap(), 8.0 * PI * PI);
        assert_eq!(parse_number("pi^2/4").unwrap(), PI * PI / 4.0);
        assert!(parse_number("2*").is_err());
        assert!(parse_number("").is_err());
        assert!("tan(1)".parse::<Factor>().is_err());
        assert!("sin(1, 2, 3)".parse::<Factor>().is_err());
        assert!("sin(1".parse::<Factor>().is_err());
    }

    proptest! {
        #[test]
        fn factor_display_round_trips(amp in -10.0f64..10.0, freq in -20.0f64..20.0, phase in -4.0f64..4.0, kind in 0usize..5) {
            let f = match kind {
                0 => Factor::Sin { amp, freq, phase },
                1 => Factor::Cos { amp, freq, phase },
                2 => Factor::Exp { amp, rate: freq },
                3 => Factor::Poly(vec![amp, freq, phase]),
                _ => Factor::Const(amp),
            };
            let back: Factor = f.to_string().parse().unwrap();
            prop_assert_eq!(back, f);
        }
    }

    #[test]
    fn dim_factor_closed_forms() {
        let mut c = CoreNetwork::zeros(1, 1, 2, None).unwrap();
        c.b2[0] = 3.0;
        let d = dim_factor(&c, &Slot { orders: vec![0], field: vec![] }, &unit_rule(3, 4)).unwrap();
        assert!((d.get(0, 0) - 3.0).abs() < 1e-14);

        let s = sine_core(PI, 1, 1);
        let d = dim_factor(&s, &Slot { orders: vec![0, 0], field: vec![] }, &unit_rule(4, 6)).unwrap();
        assert!((d.get(0, 0) - 0.5).abs() < 1e-12);

        assert!(dim_factor(&s, &Slot { orders: vec![0, 0, 0], field: vec![] }, &unit_rule(1, 2)).is_err());
        assert!(dim_factor(&s, &Slot { orders: vec![0], field: vec![] }, &Rule1D { nodes: vec![], weights: vec![] }).is_err());
    }

    #[test]
    fn dim_factor_matches_dense_trapezoid() {
        let mut rng = crate::rng::rng_for(3, 0, 0);
        let core = CoreNetwork::init(1, 2, 6, None, InitScheme::GlorotUniform, &mut rng).unwrap();
        let rule = composite_grid(Interval::new(-1.0, 1.0).unwrap(), 20, 20).unwrap();
        let d = dim_factor(&core, &Slot { orders: vec![0, 2], field: vec![] }, &rule).unwrap();
        let n = 100_000;
        let h = 2.0 / n as f64;
        let mut acc = Mat::zeros(1, 4);
        for i in 0..=n {
            let x = -1.0 + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 * h } else { h };
            let k = core.eval(x, 0).unwrap().kron(&core.eval(x, 2).unwrap());
            acc.axpy(w, &k);
        }
        for (a, b) in d.as_slice().iter().zip(acc.as_slice()) {
            assert!((a - b).abs() < 1e-8 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn constant_cores_integrate_to_power() {
        let d = 4;
        let c = 1.7;
        let cores: Vec<_> = (0..d)
            .map(|_| {
                let mut k = CoreNetwork::zeros(1, 1, 2, None).unwrap();
                k.b2[0] = c;
                k
            })
            .collect();
        let model = FttModel::from_cores(cores).unwrap();
        let rules = volume_rules::<f64>(&BoxDomain::cube(d, 0.0, 1.0).unwrap(), &QuadSpec::uniform(d, 2, 3)).unwrap();
        let u = SepTerm::solution(d, 1.0, vec![0; d], TermKind::Solution);
        let v = assemble_term(&model, &Monomial::linear(&u), &rules).unwrap();
        assert!((v - c.powi(d as i32)).abs() < 1e-12);
    }

    #[test]
    fn helmholtz_truth_mass() {
        let model = FttModel::from_cores(vec![sine_core(2.0 * PI, 1, 1), sine_core(2.0 * PI, 1, 1)]).unwrap();
        let rules = volume_rules::<f64>(&BoxDomain::cube(2, 0.0, 1.0).unwrap(), &QuadSpec::uniform(2, 10, 10)).unwrap();
        let u = SepTerm::solution(2, 1.0, vec![0, 0], TermKind::Solution);
        let v = assemble_term(&model, &Monomial::product(&u, &u), &rules).unwrap();
        assert!((v - 0.25).abs() < 1e-10);
    }

    #[test]
    fn residual_vanishes_at_helmholtz_truth() {
        // −Δu − u = (8π² − 1) sin(2πx₁) sin(2πx₂) with u = sin(2πx₁) sin(2πx₂).
        let d = 2;
        let model = FttModel::from_cores(vec![sine_core(2.0 * PI, 1, 1), sine_core(2.0 * PI, 1, 1)]).unwrap();
        let op = EllipticOperator {
            c1: 1.0,
            b: SeparableField::constant(d, -1.0),
            f: SeparableField::new(vec![FieldTerm::new(8.0 * PI * PI - 1.0, vec![Factor::sin(2.0 * PI); 2])]).unwrap(),
        };
        let rules = volume_rules::<f64>(&BoxDomain::cube(d, 0.0, 1.0).unwrap(), &QuadSpec::uniform(d, 10, 10)).unwrap();
        let f = residual_functional(&op, d, rules).unwrap();
        let v = f.evaluate(&model).unwrap();
        assert!(v.abs() <= 1e-8, "{v}");
    }

    #[test]
    fn zero_model_residual_is_source_energy() {
        let d = 3;
        let shape = ModelShape::uniform(d, 2, 4, vec![None; d]);
        let model = FttModel::<f64>::new(&shape, InitScheme::Zeros, 0).unwrap();
        let op = EllipticOperator {
            c1: 1.0,
            b: SeparableField::zero(),
            f: SeparableField::new(vec![FieldTerm::new(2.0, vec![Factor::sin(PI), Factor::Poly(vec![0.0, 1.0]), Factor::Const(1.0)])]).unwrap(),
        };
        let rules = volume_rules::<f64>(&BoxDomain::cube(d, 0.0, 1.0).unwrap(), &QuadSpec::uniform(d, 4, 6)).unwrap();
        let v = residual_functional(&op, d, rules).unwrap().evaluate(&model).unwrap();
        // ∫ 4 sin²(πx) y² dx dy dz = 4 · 1/2 · 1/3
        assert!((v - 4.0 / 6.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn energy_of_box_ground_state() {
        for d in [1usize, 2, 3] {
            let core = || {
                let mut c = CoreNetwork::zeros(1, 1, 1, None).unwrap();
                c.w1[0] = PI / 2.0;
                c.b1[0] = PI / 2.0;
                c.w2[0] = 1.0;
                c
            };
            let model = FttModel::from_cores((0..d).map(|_| core()).collect()).unwrap();
            let rules = volume_rules::<f64>(&BoxDomain::cube(d, -1.0, 1.0).unwrap(), &QuadSpec::uniform(d, 8, 8)).unwrap();
            let e = energy_functionals(&SeparableField::zero(), d, rules).unwrap();
            let (dir, pot, mass) = energy_terms(&e, &model).unwrap();
            assert_eq!(pot, 0.0);
            assert!((dir / mass - d as f64 * PI * PI / 4.0).abs() < 1e-8);
        }
    }

    #[test]
    fn l_shape_faces_cover_boundary_once() {
        let iv = |a, b| Interval::new(a, b).unwrap();
        let dom = BoxDomain::new(vec![
            vec![iv(-1.0, 0.0), iv(-1.0, 1.0), iv(-1.0, 1.0)],
            vec![iv(0.0, 1.0), iv(0.0, 1.0), iv(-1.0, 1.0)],
        ])
        .unwrap();
        let faces = dom.exterior_faces();
        let area: f64 = faces.iter().map(|f| f.area()).sum();
        // top + bottom: 2 · 3; lateral: perimeter 8 · height 2.
        assert!((area - 22.0).abs() < 1e-12, "{area}");
        // The re-entrant face x₁ = 0 only spans x₂ ∈ (−1, 0).
        let reentrant: Vec<_> = faces.iter().filter(|f| f.dim == 0 && f.value == 0.0).collect();
        assert_eq!(reentrant.len(), 1);
        assert_eq!((reentrant[0].extent[1].a, reentrant[0].extent[1].b), (-1.0, 0.0));
        let rules = face_rules::<f64>(&dom, 0.1).unwrap();
        let w: f64 = rules.iter().map(|r| r.iter().map(|q| q.weight_sum()).product::<f64>()).sum();
        assert!((w - 22.0).abs() < 1e-12);
    }

    #[test]
    fn overlapping_boxes_rejected() {
        let iv = |a, b| Interval::new(a, b).unwrap();
        assert!(BoxDomain::new(vec![vec![iv(0.0, 1.0), iv(0.0, 1.0)], vec![iv(0.5, 1.5), iv(0.5, 1.5)]]).is_err());
    }

    #[test]
    fn boundary_loss_of_constant_model() {
        let d = 3;
        let c: f64 = 0.8;
        let cores: Vec<_> = (0..d)
            .map(|_| {
                let mut k = CoreNetwork::zeros(1, 1, 2, None).unwrap();
                k.b2[0] = c.powf(1.0 / 3.0);
                k
            })
            .collect();
        let model = FttModel::from_cores(cores).unwrap();
        let f = boundary_functional::<f64>(&BoxDomain::cube(d, 0.0, 1.0).unwrap(), 0.1, &SeparableField::zero()).unwrap();
        let v = f.evaluate(&model).unwrap();
        assert!((v - c * c * 6.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn boundary_loss_vanishes_with_hard_factor() {
        let d = 3;
        let iv = Interval::new(0.0, 1.0).unwrap();
        let model = FttModel::<f64>::new(&ModelShape::uniform(d, 2, 5, vec![Some(iv); d]), InitScheme::GlorotUniform, 4).unwrap();
        let f = boundary_functional::<f64>(&BoxDomain::cube(d, 0.0, 1.0).unwrap(), 0.1, &SeparableField::zero()).unwrap();
        assert_eq!(f.evaluate(&model).unwrap(), 0.0);
    }

    #[test]
    fn box_additivity() {
        let d = 2;
        let model = FttModel::<f64>::new(&ModelShape::uniform(d, 2, 5, vec![None; d]), InitScheme::GlorotUniform, 8).unwrap();
        let iv = |a, b| Interval::new(a, b).unwrap();
        let whole = BoxDomain::new(vec![vec![iv(0.0, 1.0), iv(0.0, 1.0)]]).unwrap();
        let split = BoxDomain::new(vec![vec![iv(0.0, 0.5), iv(0.0, 1.0)], vec![iv(0.5, 1.0), iv(0.0, 1.0)]]).unwrap();
        let op = EllipticOperator { c1: 0.7, b: SeparableField::constant(d, 2.0), f: SeparableField::new(vec![FieldTerm::new(1.0, vec![Factor::cos(1.0), Factor::sin(2.0)])]).unwrap() };
        let a = residual_functional(&op, d, volume_rules(&whole, &QuadSpec::uniform(d, 8, 10)).unwrap()).unwrap().evaluate(&model).unwrap();
        let b = residual_functional(&op, d, volume_rules(&split, &QuadSpec::uniform(d, 8, 10)).unwrap()).unwrap().evaluate(&model).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn field_square_of_exact_residual() {
        // u = sin(πx) sin(πy), −Δu = 2π² u.
        let u = FieldTerm::new(1.0, vec![Factor::sin(PI), Factor::sin(PI)]);
        let lap = SeparableField::new(vec![u.clone()]).unwrap().laplacian();
        let mut terms: Vec<SepTerm> = lap.terms.iter().map(|t| SepTerm::field_term(t, -1.0, TermKind::Field)).collect();
        terms.push(SepTerm::field_term(&u, -2.0 * PI * PI, TermKind::Field));
        let rules = volume_rules::<f64>(&BoxDomain::cube(2, 0.0, 1.0).unwrap(), &QuadSpec::uniform(2, 4, 8)).unwrap();
        assert!(field_square_integral(&terms, rules).unwrap() < 1e-20);
    }
}
