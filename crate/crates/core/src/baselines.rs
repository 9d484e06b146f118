//! Comparison methods: discrete TT completion by alternating least squares, and
//! a plain one-hidden-layer sine network trained on Monte-Carlo residual (PINN)
//! or Rayleigh-quotient (deep Ritz) losses.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rayon::prelude::*;

use crate::assembly::{BoxDomain, FacePiece, SeparableField};
use crate::optim::{train_params, Hooks, Schedule, TrainFailure, TrainLog};
use crate::problems::{BoundaryTreatment, EvalSet, EvalSpec, ProblemKind, ProblemSpec};
use crate::quadrature::Interval;
use crate::rng::{rng_for, stream, Rng};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Discrete tensor train
// ---------------------------------------------------------------------------

/// A tensor in TT format. Core `k` has shape `ranks[k] × dims[k] × ranks[k+1]`,
/// stored with the last index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct TTTensor {
    pub dims: Vec<usize>,
    pub ranks: Vec<usize>,
    pub cores: Vec<Vec<f64>>,
}

impl TTTensor {
    pub fn new(dims: Vec<usize>, ranks: Vec<usize>, cores: Vec<Vec<f64>>) -> Result<Self> {
        let t = Self { dims, ranks, cores };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        let d = self.dims.len();
        if d == 0 || self.ranks.len() != d + 1 || self.cores.len() != d {
            return Err(Error::shape(format!("{d} dims need {} ranks and {d} cores", d + 1)));
        }
        if self.ranks[0] != 1 || self.ranks[d] != 1 {
            return Err(Error::shape("boundary TT ranks must be 1"));
        }
        if self.ranks.contains(&0) || self.dims.contains(&0) {
            return Err(Error::invalid("ranks and mode sizes must be positive"));
        }
        for k in 0..d {
            if self.cores[k].len() != self.ranks[k] * self.dims[k] * self.ranks[k + 1] {
                return Err(Error::shape(format!("core {k} has {} entries", self.cores[k].len())));
            }
        }
        Ok(())
    }

    /// Gaussian cores, scaled so that entries are O(1).
    pub fn random(dims: &[usize], ranks: &[usize], rng: &mut Rng) -> Result<Self> {
        let d = dims.len();
        if ranks.len() != d + 1 {
            return Err(Error::shape("ranks must have d + 1 entries"));
        }
        let cores = (0..d)
            .map(|k| {
                let scale = 1.0 / (ranks[k] as f64).sqrt();
                (0..ranks[k] * dims[k] * ranks[k + 1]).map(|_| scale * gaussian(rng)).collect()
            })
            .collect();
        Self::new(dims.to_vec(), ranks.to_vec(), cores)
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn param_count(&self) -> usize {
        self.cores.iter().map(Vec::len).sum()
    }

    /// Slice `G_k[:, i, :]` as a row-major `r_k × r_{k+1}` block (copied).
    fn slice(&self, k: usize, i: usize) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let (r0, n, r1) = (self.ranks[k], self.dims[k], self.ranks[k + 1]);
        (0..r0).flat_map(move |a| (0..r1).map(move |b| (a, b, self.cores[k][(a * n + i) * r1 + b])))
    }

    /// `v ← v · G_k[:, i, :]`
    fn push_left(&self, k: usize, i: usize, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ranks[k + 1]];
        for (a, b, g) in self.slice(k, i) {
            out[b] += v[a] * g;
        }
        out
    }

    /// `v ← G_k[:, i, :] · v`
    fn push_right(&self, k: usize, i: usize, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ranks[k]];
        for (a, b, g) in self.slice(k, i) {
            out[a] += g * v[b];
        }
        out
    }

    fn check_index(&self, index: &[usize]) -> Result<()> {
        if index.len() != self.dim() {
            return Err(Error::shape(format!("{}-index into a {}-way tensor", index.len(), self.dim())));
        }
        if let Some((k, &i)) = index.iter().enumerate().find(|(k, &i)| i >= self.dims[*k]) {
            return Err(Error::invalid(format!("index {i} out of range {} in mode {k}", self.dims[k])));
        }
        Ok(())
    }

    /// `G₁[i₁] G₂[i₂] ⋯ G_d[i_d]`.
    pub fn entry(&self, index: &[usize]) -> Result<f64> {
        self.check_index(index)?;
        let mut v = vec![1.0];
        for (k, &i) in index.iter().enumerate() {
            v = self.push_left(k, i, &v);
        }
        Ok(v[0])
    }

    /// Every entry, last index fastest. Only for small tensors.
    pub fn full(&self) -> Result<Vec<f64>> {
        let total = self
            .dims
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .filter(|&t| t <= crate::fttmodel::MAX_SAMPLED_ENTRIES)
            .ok_or_else(|| Error::Resource("tensor too large to densify".into()))?;
        let mut idx = vec![0; self.dim()];
        let mut out = Vec::with_capacity(total);
        for _ in 0..total {
            out.push(self.entry(&idx)?);
            for k in (0..self.dim()).rev() {
                idx[k] += 1;
                if idx[k] < self.dims[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Ok(out)
    }
}

/// Free function form of [`TTTensor::entry`].
pub fn tt_entry(t: &TTTensor, index: &[usize]) -> Result<f64> {
    t.entry(index)
}

fn gaussian(rng: &mut Rng) -> f64 {
    // Box–Muller; one of the pair is discarded, which keeps streams simple.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Truncated TT-SVD of a dense tensor (last index fastest). Ranks above the
/// unfolding sizes are padded with zero singular directions.
pub fn tt_svd(full: &[f64], dims: &[usize], ranks: &[usize]) -> Result<TTTensor> {
    let d = dims.len();
    if ranks.len() != d + 1 || full.len() != dims.iter().product::<usize>() {
        return Err(Error::shape("TT-SVD input does not match dims and ranks"));
    }
    let mut cores = Vec::with_capacity(d);
    let mut rest = full.to_vec();
    for k in 0..d - 1 {
        let rows = ranks[k] * dims[k];
        let cols = rest.len() / rows;
        let svd = DMatrix::from_row_slice(rows, cols, &rest).svd(true, true);
        let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
        let keep = ranks[k + 1].min(svd.singular_values.len());
        let mut core = vec![0.0; rows * ranks[k + 1]];
        for i in 0..rows {
            for b in 0..keep {
                core[i * ranks[k + 1] + b] = u[(i, b)];
            }
        }
        cores.push(core);
        let mut next = vec![0.0; ranks[k + 1] * cols];
        for b in 0..keep {
            for j in 0..cols {
                next[b * cols + j] = svd.singular_values[b] * vt[(b, j)];
            }
        }
        rest = next;
    }
    cores.push(rest);
    TTTensor::new(dims.to_vec(), ranks.to_vec(), cores)
}

/// Dense tensors up to this many entries get a spectral initial guess.
const SPECTRAL_INIT_MAX: usize = 2_000_000;

/// An observed tensor entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub index: Vec<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlsOptions {
    /// Full sweeps (left-to-right then right-to-left).
    pub sweeps: usize,
    pub ridge: f64,
    /// Stop once the observed RMSE drops below this value.
    pub tol: f64,
    pub seed: u64,
}

impl Default for AlsOptions {
    fn default() -> Self {
        Self { sweeps: 30, ridge: 1e-10, tol: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct AlsResult {
    pub tensor: TTTensor,
    /// Observed-entry RMSE at the initial guess and after every half-sweep.
    pub rmse: Vec<f64>,
    /// Slice solves skipped because the slice had fewer observations than unknowns.
    pub skipped: usize,
}

fn observed_rmse(t: &TTTensor, obs: &[Observation]) -> f64 {
    let s: f64 = obs
        .iter()
        .map(|o| {
            let e = t.entry(&o.index).expect("indices checked") - o.value;
            e * e
        })
        .sum();
    (s / obs.len() as f64).sqrt()
}

/// Refits core `k` slice by slice with the other cores fixed. The slices split
/// the observed residual, so keeping a solve only when it does not raise its
/// slice's residual makes every update monotone despite the ridge.
fn als_update(t: &mut TTTensor, k: usize, obs: &[Observation], ridge: f64) -> usize {
    let d = t.dim();
    let (r0, n, r1) = (t.ranks[k], t.dims[k], t.ranks[k + 1]);
    let m = r0 * r1;
    // Per slice: design rows and targets.
    let mut rows: Vec<Vec<(DVector<f64>, f64)>> = vec![Vec::new(); n];
    for o in obs {
        let mut left = vec![1.0];
        for j in 0..k {
            left = t.push_left(j, o.index[j], &left);
        }
        let mut right = vec![1.0];
        for j in (k + 1..d).rev() {
            right = t.push_right(j, o.index[j], &right);
        }
        let row = DVector::from_fn(m, |q, _| left[q / r1] * right[q % r1]);
        rows[o.index[k]].push((row, o.value));
    }
    let slice_sse = |g: &DVector<f64>, rows: &[(DVector<f64>, f64)]| -> f64 {
        rows.iter().map(|(r, y)| (r.dot(g) - y).powi(2)).sum()
    };
    let mut skipped = 0;
    for (i, rows) in rows.iter().enumerate() {
        if rows.len() < m {
            log::warn!("TT-ALS: slice {i} of core {k} has {} observations for {m} unknowns; kept", rows.len());
            skipped += 1;
            continue;
        }
        let mut normal = DMatrix::<f64>::identity(m, m) * ridge;
        let mut rhs = DVector::<f64>::zeros(m);
        for (r, y) in rows {
            normal.ger(1.0, r, r, 1.0);
            rhs.axpy(*y, r, 1.0);
        }
        let Some(chol) = normal.cholesky() else {
            log::warn!("TT-ALS: singular normal equations for slice {i} of core {k}; kept");
            skipped += 1;
            continue;
        };
        let g = chol.solve(&rhs);
        let old = DVector::from_fn(m, |q, _| t.cores[k][((q / r1) * n + i) * r1 + q % r1]);
        if slice_sse(&g, rows) <= slice_sse(&old, rows) {
            for q in 0..m {
                t.cores[k][((q / r1) * n + i) * r1 + q % r1] = g[q];
            }
        }
    }
    skipped
}

/// Completes a tensor from observed entries by alternating least squares over
/// its TT cores.
pub fn tt_als_complete(obs: &[Observation], dims: &[usize], ranks: &[usize], opts: &AlsOptions) -> Result<AlsResult> {
    if obs.is_empty() {
        return Err(Error::invalid("TT-ALS needs at least one observation"));
    }
    if !(opts.ridge >= 0.0) {
        return Err(Error::invalid("ridge must be non-negative"));
    }
    let mut rng = rng_for(opts.seed, stream::INIT, 0);
    let mut t = TTTensor::random(dims, ranks, &mut rng)?;
    for o in obs {
        t.check_index(&o.index)?;
    }
    // Spectral start: TT-SVD of the zero-filled observations rescaled by the
    // sampling fraction. Random starts stall in swamps on a sizeable share of seeds.
    let total = dims.iter().try_fold(1usize, |acc, &n| acc.checked_mul(n));
    if let Some(total) = total.filter(|&t| t <= SPECTRAL_INIT_MAX) {
        let scale = total as f64 / obs.len() as f64;
        let mut dense = vec![0.0; total];
        for o in obs {
            let flat = o.index.iter().zip(dims).fold(0, |acc, (&i, &n)| acc * n + i);
            dense[flat] = scale * o.value;
        }
        let init = tt_svd(&dense, dims, ranks)?;
        if init.cores.iter().flatten().all(|v| v.is_finite()) {
            t = init;
        }
    }
    let d = t.dim();
    let mut rmse = vec![observed_rmse(&t, obs)];
    let mut skipped = 0;
    for _ in 0..opts.sweeps {
        for order in [(0..d).collect::<Vec<_>>(), (0..d).rev().collect()] {
            for k in order {
                skipped += als_update(&mut t, k, obs, opts.ridge);
            }
            rmse.push(observed_rmse(&t, obs));
        }
        if *rmse.last().unwrap() <= opts.tol {
            break;
        }
    }
    Ok(AlsResult { tensor: t, rmse, skipped })
}

/// Tensor grid sampling of a function: `n` equispaced points per dimension on
/// each interval, endpoints included.
pub fn grid_values(bounds: &[Interval<f64>], n: usize) -> Vec<Vec<f64>> {
    bounds
        .iter()
        .map(|iv| (0..n).map(|i| iv.a + (iv.b - iv.a) * i as f64 / (n - 1).max(1) as f64).collect())
        .collect()
}

/// Result of completing a sampled grid of a problem's target.
#[derive(Debug, Clone)]
pub struct TtdOutcome {
    pub param_count: usize,
    /// Relative error over the unobserved grid entries.
    pub heldout_rel_error: f64,
    pub rmse: Vec<f64>,
}

/// Samples the target of a supervised problem on an `n^d` grid, observes a
/// random `fraction` of entries and completes the rest with TT-ALS.
pub fn ttd_on_grid(spec: &ProblemSpec, n: usize, fraction: f64, rank: usize, opts: &AlsOptions) -> Result<TtdOutcome> {
    let target = spec.exact.as_ref().ok_or_else(|| Error::invalid("TT completion needs a target"))?;
    if !(fraction > 0.0 && fraction <= 1.0) || n < 2 {
        return Err(Error::invalid("observed fraction must lie in (0, 1] and the grid needs n ≥ 2"));
    }
    let d = spec.dim();
    let axes = grid_values(&spec.domain.bounding(), n);
    let total = n
        .checked_pow(d as u32)
        .filter(|&t| t <= crate::fttmodel::MAX_SAMPLED_ENTRIES)
        .ok_or_else(|| Error::Resource(format!("{n}^{d} grid")))?;
    let mut rng = rng_for(opts.seed, stream::DATA, 0);
    let (mut observed, mut held) = (Vec::new(), Vec::new());
    let mut idx = vec![0usize; d];
    let mut x = vec![0.0; d];
    for _ in 0..total {
        for k in 0..d {
            x[k] = axes[k][idx[k]];
        }
        let o = Observation { index: idx.clone(), value: target.eval(&x) };
        if rng.gen_bool(fraction) {
            observed.push(o);
        } else {
            held.push(o);
        }
        for k in (0..d).rev() {
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
        }
    }
    let mut ranks = vec![rank; d + 1];
    ranks[0] = 1;
    ranks[d] = 1;
    let res = tt_als_complete(&observed, &vec![n; d], &ranks, opts)?;
    let (mut num, mut den) = (0.0, 0.0);
    for o in &held {
        let e = res.tensor.entry(&o.index)? - o.value;
        num += e * e;
        den += o.value * o.value;
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric("no held-out entries".into()));
    }
    Ok(TtdOutcome { param_count: res.tensor.param_count(), heldout_rel_error: (num / den).sqrt(), rmse: res.rmse })
}

// ---------------------------------------------------------------------------
// Monte-Carlo network baselines
// ---------------------------------------------------------------------------

/// `u(x) = Q(x) · (Σ_j a_j sin(w_j·x + b_j) + c)` with `Q = Π (x_i − a_i)(b_i − x_i)`
/// when a hard boundary box is set, `Q = 1` otherwise.
///
/// Parameters are laid out as `W` (row-major, `hidden × d`), `b`, `a`, `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct MCNetModel {
    pub d: usize,
    pub hidden: usize,
    pub params: Vec<f64>,
    pub boundary: Option<Vec<Interval<f64>>>,
}

/// Value, gradient and Laplacian at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub u: f64,
    pub grad: Vec<f64>,
    pub lap: f64,
}

/// Per-point quantities reused by the adjoint pass.
struct Trace {
    q: f64,
    dq: Vec<f64>,
    lap_q: f64,
    n: f64,
    dn: Vec<f64>,
    lap_n: f64,
    s: Vec<f64>,
    c: Vec<f64>,
    wnorm2: Vec<f64>,
}

impl MCNetModel {
    pub fn param_count_for(d: usize, hidden: usize) -> usize {
        hidden * d + 2 * hidden + 1
    }

    pub fn zeros(d: usize, hidden: usize, boundary: Option<Vec<Interval<f64>>>) -> Result<Self> {
        if d == 0 || hidden == 0 {
            return Err(Error::invalid("network needs d > 0 and hidden > 0"));
        }
        if boundary.as_ref().is_some_and(|b| b.len() != d) {
            return Err(Error::shape("one boundary interval per input needed"));
        }
        Ok(Self { d, hidden, params: vec![0.0; Self::param_count_for(d, hidden)], boundary })
    }

    /// Glorot-uniform weights with the input layer scaled by π, matching the FTT cores.
    pub fn init(d: usize, hidden: usize, boundary: Option<Vec<Interval<f64>>>, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(d, hidden, boundary)?;
        let mut rng = rng_for(seed, stream::INIT, 1_000_000);
        let pi = std::f64::consts::PI;
        let lim1 = (6.0 / (d + hidden) as f64).sqrt() * pi;
        let lim2 = (6.0 / (hidden + 1) as f64).sqrt();
        let hd = hidden * d;
        for (i, p) in net.params.iter_mut().enumerate() {
            *p = if i < hd {
                rng.gen_range(-lim1..lim1)
            } else if i < hd + hidden {
                rng.gen_range(-pi..pi)
            } else if i < hd + 2 * hidden {
                rng.gen_range(-lim2..lim2)
            } else {
                0.0
            };
        }
        Ok(net)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let (d, h) = (self.d, self.hidden);
        let (w, rest) = self.params.split_at(h * d);
        let (b, rest) = rest.split_at(h);
        let (a, c) = rest.split_at(h);
        let mut tr = Trace {
            q: 1.0,
            dq: vec![0.0; d],
            lap_q: 0.0,
            n: c[0],
            dn: vec![0.0; d],
            lap_n: 0.0,
            s: vec![0.0; h],
            c: vec![0.0; h],
            wnorm2: vec![0.0; h],
        };
        for j in 0..h {
            let wj = &w[j * d..(j + 1) * d];
            let z: f64 = wj.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() + b[j];
            let (s, co) = z.sin_cos();
            let n2: f64 = wj.iter().map(|v| v * v).sum();
            tr.s[j] = s;
            tr.c[j] = co;
            tr.wnorm2[j] = n2;
            tr.n += a[j] * s;
            for k in 0..d {
                tr.dn[k] += a[j] * wj[k] * co;
            }
            tr.lap_n -= a[j] * n2 * s;
        }
        if let Some(bnd) = &self.boundary {
            let qs: Vec<(f64, f64)> = bnd.iter().zip(x).map(|(iv, &xi)| ((xi - iv.a) * (iv.b - xi), iv.a + iv.b - 2.0 * xi)).collect();
            tr.q = qs.iter().map(|p| p.0).product();
            for k in 0..d {
                let others: f64 = qs.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, p)| p.0).product();
                tr.dq[k] = qs[k].1 * others;
                tr.lap_q += -2.0 * others;
            }
        }
        tr
    }

    fn jet_of(tr: &Trace) -> Jet {
        let grad: Vec<f64> = (0..tr.dq.len()).map(|k| tr.dq[k] * tr.n + tr.q * tr.dn[k]).collect();
        let cross: f64 = tr.dq.iter().zip(&tr.dn).map(|(p, q)| p * q).sum();
        Jet { u: tr.q * tr.n, grad, lap: tr.lap_q * tr.n + 2.0 * cross + tr.q * tr.lap_n }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let tr = self.trace(x);
        tr.q * tr.n
    }

    pub fn jet(&self, x: &[f64]) -> Jet {
        Self::jet_of(&self.trace(x))
    }

    /// Accumulates `ḡ_N ∂N/∂θ + Σ_k ḡ_k ∂(∂_k N)/∂θ + ḡ_Δ ∂(ΔN)/∂θ` into `grad`.
    fn backprop(&self, x: &[f64], tr: &Trace, g_n: f64, g_d: &[f64], g_lap: f64, grad: &mut [f64]) {
        let (d, h) = (self.d, self.hidden);
        let w = &self.params[..h * d];
        let a = &self.params[h * d + h..h * d + 2 * h];
        let (gw, rest) = grad.split_at_mut(h * d);
        let (gb, rest) = rest.split_at_mut(h);
        let (ga, gc) = rest.split_at_mut(h);
        gc[0] += g_n;
        for j in 0..h {
            let wj = &w[j * d..(j + 1) * d];
            let (s, c, n2) = (tr.s[j], tr.c[j], tr.wnorm2[j]);
            let gw_dot: f64 = g_d.iter().zip(wj).map(|(p, q)| p * q).sum();
            ga[j] += g_n * s + gw_dot * c - g_lap * n2 * s;
            let dz = a[j] * (g_n * c - gw_dot * s - g_lap * n2 * c);
            gb[j] += dz;
            for m in 0..d {
                gw[j * d + m] += dz * x[m] + a[j] * (g_d[m] * c - 2.0 * g_lap * wj[m] * s);
            }
        }
    }
}

/// Uniform points in a union of boxes (rejection from the bounding box).
pub fn sample_domain(domain: &BoxDomain, n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let bounds = domain.bounding();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p: Vec<f64> = bounds.iter().map(|iv| rng.gen_range(iv.a..iv.b)).collect();
        if domain.contains(&p) {
            out.push(p);
        }
    }
    out
}

/// Uniform points on the exterior boundary, faces chosen proportionally to area.
pub fn sample_boundary(faces: &[FacePiece], n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let areas: Vec<f64> = faces.iter().map(FacePiece::area).collect();
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut t = rng.gen_range(0.0..total);
            let mut f = faces.len() - 1;
            for (i, a) in areas.iter().enumerate() {
                if t < *a {
                    f = i;
                    break;
                }
                t -= a;
            }
            let face = &faces[f];
            face.extent
                .iter()
                .enumerate()
                .map(|(k, iv)| if k == face.dim { face.value } else { rng.gen_range(iv.a..iv.b) })
                .collect()
        })
        .collect()
}

/// Fixed sample sets for one Monte-Carlo run.
#[derive(Debug, Clone)]
pub struct McSamples {
    pub interior: Vec<Vec<f64>>,
    /// Field values at the interior points: `b`, `f` (or `V` for eigenproblems).
    pub b: Vec<f64>,
    pub f: Vec<f64>,
    pub boundary: Vec<Vec<f64>>,
    pub g: Vec<f64>,
    pub beta: f64,
}

impl McSamples {
    /// Draws `n` interior points, and `n / 4` boundary points when the boundary is soft.
    pub fn draw(spec: &ProblemSpec, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("Monte-Carlo loss needs n ≥ 1"));
        }
        let mut rng = rng_for(seed, stream::SAMPLING, 0);
        let interior = sample_domain(&spec.domain, n, &mut rng);
        let evalf = |f: &SeparableField, pts: &[Vec<f64>]| pts.iter().map(|p| f.eval(p)).collect::<Vec<_>>();
        let (b, f) = match spec.kind {
            ProblemKind::Eigenvalue => (evalf(&spec.potential, &interior), vec![0.0; n]),
            _ => (evalf(&spec.b, &interior), evalf(&spec.f, &interior)),
        };
        let (boundary, g, beta) = match &spec.boundary {
            BoundaryTreatment::Soft { beta, g, .. } if spec.kind == ProblemKind::Elliptic => {
                let pts = sample_boundary(&spec.domain.exterior_faces(), (n / 4).max(1), &mut rng);
                let gv = evalf(g, &pts);
                (pts, gv, *beta)
            }
            _ => (Vec::new(), Vec::new(), 0.0),
        };
        Ok(Self { interior, b, f, boundary, g, beta })
    }
}

/// The network a problem's baseline trains: hard factor on the bounding box
/// when the problem uses hard boundary conditions.
pub fn baseline_net(spec: &ProblemSpec, hidden: usize, seed: u64) -> Result<MCNetModel> {
    let boundary = match spec.boundary {
        BoundaryTreatment::Hard => Some(spec.domain.bounding()),
        BoundaryTreatment::Soft { .. } => None,
    };
    MCNetModel::init(spec.dim(), hidden, boundary, seed)
}

/// Samples per parallel work item. Fixed, so the reduction order and hence
/// the result do not depend on the number of threads.
const MC_CHUNK: usize = 512;

/// Sums per-chunk `(value, gradient)` pairs in chunk order.
fn chunked_sum(len: usize, n_params: usize, f: impl Fn(std::ops::Range<usize>, &mut [f64]) -> f64 + Sync) -> (f64, Vec<f64>) {
    let chunks: Vec<(f64, Vec<f64>)> = (0..len.div_ceil(MC_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut g = vec![0.0; n_params];
            let v = f(c * MC_CHUNK..((c + 1) * MC_CHUNK).min(len), &mut g);
            (v, g)
        })
        .collect();
    let mut grad = vec![0.0; n_params];
    let mut total = 0.0;
    for (v, g) in chunks {
        total += v;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    (total, grad)
}

/// `mean (L u − f)²` over the interior samples, plus `β · mean (u − g)²` over
/// the boundary samples for soft boundary conditions, with its gradient.
pub fn mc_residual_value_and_grad(net: &MCNetModel, c1: f64, s: &McSamples) -> (f64, Vec<f64>) {
    let n = s.interior.len() as f64;
    let (mut loss, mut grad) = chunked_sum(s.interior.len(), net.param_count(), |range, grad| {
        let mut g_d = vec![0.0; net.d];
        let mut loss = 0.0;
        for i in range {
            let x = &s.interior[i];
            let tr = net.trace(x);
            let jet = MCNetModel::jet_of(&tr);
            let r = -c1 * jet.lap + s.b[i] * jet.u - s.f[i];
            loss += r * r / n;
            let w = 2.0 * r / n;
            for k in 0..net.d {
                g_d[k] = w * (-2.0 * c1 * tr.dq[k]);
            }
            net.backprop(x, &tr, w * (-c1 * tr.lap_q + s.b[i] * tr.q), &g_d, w * (-c1 * tr.q), grad);
        }
        loss
    });
    if !s.boundary.is_empty() {
        let nb = s.boundary.len() as f64;
        let zero = vec![0.0; net.d];
        let (bl, bg) = chunked_sum(s.boundary.len(), net.param_count(), |range, grad| {
            let mut loss = 0.0;
            for i in range {
                let x = &s.boundary[i];
                let tr = net.trace(x);
                let r = tr.q * tr.n - s.g[i];
                loss += s.beta * r * r / nb;
                net.backprop(x, &tr, 2.0 * s.beta * r / nb * tr.q, &zero, 0.0, grad);
            }
            loss
        });
        loss += bl;
        grad.iter_mut().zip(&bg).for_each(|(a, b)| *a += b);
    }
    (loss, grad)
}

/// Monte-Carlo residual loss of `net` for an elliptic problem on a fresh sample set.
pub fn mc_residual_loss(net: &MCNetModel, spec: &ProblemSpec, n: usize, seed: u64) -> Result<f64> {
    if spec.kind != ProblemKind::Elliptic {
        return Err(Error::invalid("residual loss needs an elliptic problem"));
    }
    let s = McSamples::draw(spec, n, seed)?;
    Ok(mc_residual_value_and_grad(net, spec.c1, &s).0)
}

/// Monte-Carlo Rayleigh quotient `(mean |∇u|² + mean V u²) / mean u²` with its gradient.
pub fn drm_value_and_grad(net: &MCNetModel, s: &McSamples) -> Result<(f64, Vec<f64>)> {
    let len = s.interior.len();
    let n = len as f64;
    // First pass: numerator and mass, packed into a two-entry "gradient".
    let (_, sums) = chunked_sum(len, 2, |range, acc| {
        for i in range {
            let j = net.jet(&s.interior[i]);
            acc[0] += (j.grad.iter().map(|g| g * g).sum::<f64>() + s.b[i] * j.u * j.u) / n;
            acc[1] += j.u * j.u / n;
        }
        0.0
    });
    let (num, den) = (sums[0], sums[1]);
    if !(den > crate::gradients::MIN_MASS) {
        return Err(Error::DegenerateModel(format!("Monte-Carlo mass {den:e} too small for a Rayleigh quotient")));
    }
    let lambda = num / den;
    let (_, grad) = chunked_sum(len, net.param_count(), |range, grad| {
        let mut g_d = vec![0.0; net.d];
        for i in range {
            let x = &s.interior[i];
            let tr = net.trace(x);
            let j = MCNetModel::jet_of(&tr);
            let cu = 2.0 * (s.b[i] - lambda) * j.u / (n * den);
            let mut g_n = cu * tr.q;
            for k in 0..net.d {
                let ck = 2.0 * j.grad[k] / (n * den);
                g_n += ck * tr.dq[k];
                g_d[k] = ck * tr.q;
            }
            net.backprop(x, &tr, g_n, &g_d, 0.0, grad);
        }
        0.0
    });
    Ok((lambda, grad))
}

/// Monte-Carlo Rayleigh quotient of `net` for an eigenvalue problem.
pub fn drm_rayleigh(net: &MCNetModel, spec: &ProblemSpec, n: usize, seed: u64) -> Result<f64> {
    if spec.kind != ProblemKind::Eigenvalue {
        return Err(Error::invalid("Rayleigh quotient needs an eigenvalue problem"));
    }
    let s = McSamples::draw(spec, n, seed)?;
    Ok(drm_value_and_grad(net, &s)?.0)
}

/// Trains a Monte-Carlo baseline (PINN for elliptic, deep Ritz for eigenvalue
/// problems) on one fixed sample set of size `n`, using the same schedule type
/// as the FTT models. The relative error is monitored when an exact solution exists.
pub fn train_mc(
    spec: &ProblemSpec,
    net: &mut MCNetModel,
    n: usize,
    schedule: &Schedule,
    eval: EvalSpec,
) -> std::result::Result<TrainLog, TrainFailure> {
    let wrap = |e: Error| TrainFailure { error: e, log: TrainLog::default() };
    if spec.kind == ProblemKind::SupervisedApprox {
        return Err(wrap(Error::UnsupportedProblem("Monte-Carlo baselines cover PDE problems only".into())));
    }
    let samples = McSamples::draw(spec, n, schedule.seed).map_err(wrap)?;
    let set = match &spec.exact {
        Some(_) => Some(EvalSet::new(spec, eval).map_err(wrap)?),
        None => None,
    };
    let mut work = net.clone();
    let kind = spec.kind;
    let c1 = spec.c1;
    let mut loss = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        work.params.copy_from_slice(p);
        match kind {
            ProblemKind::Eigenvalue => drm_value_and_grad(&work, &samples),
            _ => Ok(mc_residual_value_and_grad(&work, c1, &samples)),
        }
    };
    let mut probe = net.clone();
    let mut monitor = |p: &[f64]| -> Option<f64> {
        let set = set.as_ref()?;
        probe.params.copy_from_slice(p);
        Some(set.relative_error_of(&|x| probe.eval(x)))
    };
    let hooks = Hooks { monitor: Some(&mut monitor), checkpoint: None };
    let mut params = net.params.clone();
    let out = train_params(&mut params, &mut loss, schedule, hooks);
    net.params = params;
    out
}

/// Relative error of a baseline network over an evaluation set.
pub fn mc_relative_error(net: &MCNetModel, spec: &ProblemSpec, eval: EvalSpec) -> Result<f64> {
    Ok(EvalSet::new(spec, eval)?.relative_error_of(&|x| net.eval(x)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{Factor, FieldTerm, QuadSpec};
    use crate::corenet::CoreNetwork;
    use crate::fttmodel::FttModel;
    use crate::problems::builtin;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn random_tt(dims: &[usize], ranks: &[usize], seed: u64) -> TTTensor {
        TTTensor::random(dims, ranks, &mut rng_for(seed, 99, 0)).unwrap()
    }

    #[test]
    fn entry_trivial_cases() {
        let t = TTTensor::new(vec![3, 4], vec![1, 1, 1], vec![vec![1.0; 3], vec![1.0; 4]]).unwrap();
        assert_eq!(t.entry(&[2, 3]).unwrap(), 1.0);
        let g = vec![1.0, 2.0, 3.0];
        let h = vec![5.0, 7.0];
        let t = TTTensor::new(vec![3, 2], vec![1, 1, 1], vec![g.clone(), h.clone()]).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(tt_entry(&t, &[i, j]).unwrap(), g[i] * h[j]);
            }
        }
        assert!(t.entry(&[3, 0]).is_err());
        assert!(t.entry(&[0]).is_err());
    }

    proptest! {
        #[test]
        fn entry_equals_explicit_sum(seed in 0u64..1000, r1 in 1usize..4, r2 in 1usize..4) {
            let dims = [3, 4, 2];
            let t = random_tt(&dims, &[1, r1, r2, 1], seed);
            for i in 0..3 { for j in 0..4 { for k in 0..2 {
                let mut s = 0.0;
                for a in 0..r1 { for b in 0..r2 {
                    s += t.cores[0][i * r1 + a] * t.cores[1][(a * 4 + j) * r2 + b] * t.cores[2][b * 2 + k];
                }}
                prop_assert!((t.entry(&[i, j, k]).unwrap() - s).abs() <= 1e-12 * (1.0 + s.abs()));
            }}}
        }
    }

    fn observe(t: &TTTensor, fraction: f64, seed: u64) -> Vec<Observation> {
        let full = t.full().unwrap();
        let mut rng = rng_for(seed, stream::DATA, 7);
        let mut out = Vec::new();
        let d = t.dim();
        for (flat, v) in full.iter().enumerate() {
            if fraction < 1.0 && !rng.gen_bool(fraction) {
                continue;
            }
            let mut idx = vec![0; d];
            let mut rem = flat;
            for k in (0..d).rev() {
                idx[k] = rem % t.dims[k];
                rem /= t.dims[k];
            }
            out.push(Observation { index: idx, value: *v });
        }
        out
    }

    fn rel_err(a: &TTTensor, b: &TTTensor) -> f64 {
        let (fa, fb) = (a.full().unwrap(), b.full().unwrap());
        let num: f64 = fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum();
        let den: f64 = fb.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn fully_observed_rank_one_recovers_quickly() {
        let truth = random_tt(&[6, 5, 4], &[1, 1, 1, 1], 3);
        let obs = observe(&truth, 1.0, 0);
        let res = tt_als_complete(&obs, &truth.dims, &truth.ranks, &AlsOptions { sweeps: 3, ..AlsOptions::default() }).unwrap();
        assert!(rel_err(&res.tensor, &truth) <= 1e-10);
    }

    /// A rank-2 20×20 matrix has 76 degrees of freedom, more than the 60 entries
    /// a 15% sample provides, so the matrix case observes half the entries. ALS
    /// converges linearly and slowly on this barely oversampled case.
    #[test]
    fn matrix_completion_rank_two() {
        let truth = random_tt(&[20, 20], &[1, 2, 1], 5);
        let obs = observe(&truth, 0.5, 1);
        let res = tt_als_complete(&obs, &truth.dims, &truth.ranks, &AlsOptions { sweeps: 100, ..AlsOptions::default() }).unwrap();
        let e = rel_err(&res.tensor, &truth);
        assert!(e <= 1e-6, "{e}");
        for w in res.rmse.windows(2) { assert!(w[1] <= w[0] + 1e-12, "{w:?}"); }
    }

    #[test]
    fn underdetermined_slices_are_kept() {
        let truth = random_tt(&[5, 5], &[1, 2, 1], 2);
        let obs = vec![Observation { index: vec![0, 0], value: 1.0 }];
        let res = tt_als_complete(&obs, &truth.dims, &truth.ranks, &AlsOptions { sweeps: 1, ..AlsOptions::default() }).unwrap();
        assert!(res.skipped > 0);
        assert!(tt_als_complete(&[], &truth.dims, &truth.ranks, &AlsOptions::default()).is_err());
    }

    fn fd_check(f: &mut dyn FnMut(&[f64]) -> (f64, Vec<f64>), p: &[f64]) {
        let (_, g) = f(p);
        let h = 1e-6;
        for i in (0..p.len()).step_by((p.len() / 25).max(1)) {
            let mut q = p.to_vec();
            q[i] += h;
            let fp = f(&q).0;
            q[i] -= 2.0 * h;
            let fm = f(&q).0;
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * (1.0 + g[i].abs()), "coord {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn jet_matches_finite_differences() {
        let net = MCNetModel::init(3, 7, Some(vec![Interval::new(-1.0, 1.0).unwrap(); 3]), 4).unwrap();
        let x = [0.3, -0.2, 0.6];
        let j = net.jet(&x);
        let h = 1e-4;
        let mut lap = 0.0;
        for k in 0..3 {
            let mut xp = x;
            xp[k] += h;
            let mut xm = x;
            xm[k] -= h;
            let (up, um) = (net.eval(&xp), net.eval(&xm));
            assert!(((up - um) / (2.0 * h) - j.grad[k]).abs() < 1e-7);
            lap += (up - 2.0 * j.u + um) / (h * h);
        }
        assert!((lap - j.lap).abs() < 1e-5 * (1.0 + j.lap.abs()));
    }

    #[test]
    fn hard_factor_vanishes_on_faces() {
        let net = MCNetModel::init(3, 5, Some(vec![Interval::new(0.0, 1.0).unwrap(); 3]), 1).unwrap();
        assert_eq!(net.eval(&[0.0, 0.4, 0.7]), 0.0);
        assert_eq!(net.eval(&[0.2, 1.0, 0.7]), 0.0);
    }

    #[test]
    fn residual_gradient_matches_fd() {
        for name in ["poisson-d3", "poisson-lshape"] {
            let spec = builtin(name).unwrap();
            let net = baseline_net(&spec, 6, 2).unwrap();
            let s = McSamples::draw(&spec, 40, 0).unwrap();
            let mut f = |p: &[f64]| {
                let mut n = net.clone();
                n.params.copy_from_slice(p);
                mc_residual_value_and_grad(&n, spec.c1, &s)
            };
            fd_check(&mut f, &net.params);
        }
    }

    #[test]
    fn drm_gradient_matches_fd() {
        let spec = builtin("schrodinger-d5").unwrap();
        let net = baseline_net(&spec, 6, 2).unwrap();
        let s = McSamples::draw(&spec, 40, 0).unwrap();
        let mut f = |p: &[f64]| {
            let mut n = net.clone();
            n.params.copy_from_slice(p);
            drm_value_and_grad(&n, &s).unwrap()
        };
        fd_check(&mut f, &net.params);
    }

    #[test]
    fn mc_losses_do_not_depend_on_thread_count() {
        let spec = builtin("poisson-lshape").unwrap();
        let net = baseline_net(&spec, 8, 1).unwrap();
        let s = McSamples::draw(&spec, 3000, 2).unwrap();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| mc_residual_value_and_grad(&net, spec.c1, &s))
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn zero_net_gives_mean_f_squared() {
        let spec = builtin("poisson-d3").unwrap();
        let net = MCNetModel::zeros(3, 4, Some(spec.domain.bounding())).unwrap();
        let s = McSamples::draw(&spec, 500, 9).unwrap();
        let want = s.f.iter().map(|v| v * v).sum::<f64>() / 500.0;
        assert!((mc_residual_loss(&net, &spec, 500, 9).unwrap() - want).abs() <= 1e-12 * want);
    }

    /// One neuron represents `u = sin(2πx₁)` exactly; pose the Helmholtz operator
    /// with that solution and matching boundary data.
    #[test]
    fn exact_network_has_zero_residual() {
        let mut spec = builtin("helmholtz-d3").unwrap();
        let u = SeparableField::new(vec![FieldTerm::new(1.0, vec![Factor::sin(2.0 * PI), Factor::Const(1.0), Factor::Const(1.0)])]).unwrap();
        spec.f = u.scaled(4.0 * PI * PI - 1.0);
        spec.boundary = BoundaryTreatment::Soft { beta: 1.0, g: u.clone(), spacing: 0.1 };
        let mut net = MCNetModel::zeros(3, 1, None).unwrap();
        net.params[0] = 2.0 * PI;
        net.params[4] = 1.0;
        assert!(mc_residual_loss(&net, &spec, 2000, 0).unwrap() <= 1e-8);
    }

    /// `u(x) = q(x)·(a sin(w x₁ + b) + c)`, the same function as an FTT model
    /// whose first core is that sine and the others are constant one.
    fn twin_models(boundary: bool) -> (MCNetModel, FttModel<f64>) {
        let (w, b, a, c) = (1.3, 0.4, 0.8, 0.3);
        let iv = Interval::new(-1.0, 1.0).unwrap();
        let bnd = boundary.then_some(iv);
        let mut net = MCNetModel::zeros(3, 1, boundary.then(|| vec![iv; 3])).unwrap();
        net.params.copy_from_slice(&[w, 0.0, 0.0, b, a, c]);
        let mut cores = Vec::new();
        let mut c0 = CoreNetwork::zeros(1, 1, 1, bnd).unwrap();
        c0.w1[0] = w;
        c0.b1[0] = b;
        c0.w2[0] = a;
        c0.b2[0] = c;
        cores.push(c0);
        for _ in 0..2 {
            let mut ci = CoreNetwork::zeros(1, 1, 1, bnd).unwrap();
            ci.b2[0] = 1.0;
            cores.push(ci);
        }
        (net, FttModel::from_cores(cores).unwrap())
    }

    #[test]
    fn mc_estimate_converges_to_quadrature() {
        let mut spec = builtin("poisson-d3").unwrap();
        spec.quad = QuadSpec::uniform(3, 8, 12);
        let (net, ftt) = twin_models(true);
        let x = [0.2, -0.5, 0.7];
        assert!((net.eval(&x) - ftt.forward(&x).unwrap()).abs() < 1e-14);
        let exact = spec.residual_loss(&ftt).unwrap() / spec.domain.volume();
        let n = 1_000_000;
        let s = McSamples::draw(&spec, n, 11).unwrap();
        let r2: Vec<f64> = s
            .interior
            .iter()
            .zip(s.f.iter())
            .map(|(p, f)| {
                let j = net.jet(p);
                let r = -j.lap - f;
                r * r
            })
            .collect();
        let mean = r2.iter().sum::<f64>() / n as f64;
        let var = r2.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - exact).abs() <= 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn mc_is_unbiased_over_reseedings() {
        let mut spec = builtin("poisson-d3").unwrap();
        spec.quad = QuadSpec::uniform(3, 8, 12);
        let (net, ftt) = twin_models(true);
        let exact = spec.residual_loss(&ftt).unwrap() / spec.domain.volume();
        let vals: Vec<f64> = (0..50).map(|s| mc_residual_loss(&net, &spec, 2000, s).unwrap()).collect();
        let mean = vals.iter().sum::<f64>() / 50.0;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 49.0;
        assert!((mean - exact).abs() <= 3.0 * (var / 50.0).sqrt(), "{mean} vs {exact}");
    }

    #[test]
    fn drm_box_eigenfunction() {
        // A single neuron cannot form a product of cosines, so test in one dimension.
        let mut spec = builtin("schrodinger-d5").unwrap();
        spec.domain = BoxDomain::cube(1, -1.0, 1.0).unwrap();
        spec.potential = SeparableField::zero();
        let mut net = MCNetModel::zeros(1, 1, None).unwrap();
        net.params.copy_from_slice(&[PI / 2.0, PI / 2.0, 1.0, 0.0]);
        let l = drm_rayleigh(&net, &spec, 200_000, 3).unwrap();
        assert!((l - PI * PI / 4.0).abs() < 0.02, "{l}");
        let net = MCNetModel { params: vec![0.0, 0.0, 0.0, 1.0], boundary: Some(vec![Interval::new(-1.0, 1.0).unwrap()]), ..net };
        assert!(drm_rayleigh(&net, &spec, 1000, 0).unwrap().is_finite());
        assert!(matches!(drm_rayleigh(&MCNetModel::zeros(1, 2, None).unwrap(), &spec, 10, 0), Err(Error::DegenerateModel(_))));
    }

    #[test]
    fn short_pinn_run_reduces_loss() {
        let spec = builtin("poisson-d3").unwrap();
        let mut net = baseline_net(&spec, 10, 0).unwrap();
        let sched = Schedule { log_every: 10, ..Schedule::new(30, 3e-3, 10, 0.1) };
        let log = train_mc(&spec, &mut net, 200, &sched, EvalSpec::TensorGrid { n: 9 }).unwrap();
        assert_eq!(log.records.len(), 40);
        assert!(log.final_loss().unwrap() < log.records[0].loss);
        assert!(log.last_rel_error().is_some());
    }
}
