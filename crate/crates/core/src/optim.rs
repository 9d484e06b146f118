//! Adam, L-BFGS and the two-phase training schedule (Adam epochs, then L-BFGS
//! epochs, one optimizer step per epoch on the full deterministic loss).

use std::collections::VecDeque;
use std::fmt;
use std::time::Instant;

use crate::fttmodel::FttModel;
use crate::gradients::{Objective, ParamVector};
use crate::{lit, Error, Result, Scalar};

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn finite_or_fail<T: Scalar>(what: &str, g: &[T]) -> Result<()> {
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure { term: what.into(), detail: format!("non-finite gradient entry {i}") });
    }
    Ok(())
}

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(n: usize, lr: T) -> Self {
        Self { lr, beta1: lit(0.9), beta2: lit(0.999), eps: lit(1e-8), m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[T], &[T]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam state has {} entries, params {}, grad {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        finite_or_fail("adam step", grad)?;
        self.t += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.t.min(i32::MAX as u64) as i32);
        let bc2 = one - self.beta2.powi(self.t.min(i32::MAX as u64) as i32);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (one - self.beta1) * g;
            *v = self.beta2 * *v + (one - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// How an L-BFGS step ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    /// Both strong Wolfe conditions held.
    Wolfe,
    /// Sufficient decrease only; the evaluation budget ran out before curvature held.
    SufficientDecrease,
    /// No acceptable point; a short normalized gradient step was taken and history cleared.
    Fallback,
    /// Zero gradient; nothing to do.
    Stationary,
}

#[derive(Debug, Clone)]
pub struct StepInfo<T> {
    pub loss: T,
    pub step: T,
    pub evals: usize,
    pub outcome: StepOutcome,
}

/// Limited-memory BFGS with a strong-Wolfe line search whose initial trial
/// step is the learning rate.
#[derive(Debug, Clone)]
pub struct Lbfgs<T> {
    pub lr: T,
    pub history: usize,
    pub c1: T,
    pub c2: T,
    pub max_evals: usize,
    pairs: VecDeque<(Vec<T>, Vec<T>)>,
    cache: Option<(Vec<T>, T, Vec<T>)>,
}

/// Minimum curvature `sᵀy` for a pair to enter the history.
pub const MIN_CURVATURE: f64 = 1e-10;

type LossFn<'a, T> = dyn FnMut(&[T]) -> Result<(T, Vec<T>)> + 'a;

impl<T: Scalar> Lbfgs<T> {
    pub fn new(lr: T) -> Self {
        Self { lr, history: 10, c1: lit(1e-4), c2: lit(0.9), max_evals: 25, pairs: VecDeque::new(), cache: None }
    }

    pub fn history_len(&self) -> usize {
        self.pairs.len()
    }

    pub fn clear_history(&mut self) {
        self.pairs.clear();
    }

    /// Two-loop recursion: `−H g`, with the usual `sᵀy / yᵀy` initial scaling.
    pub fn direction(&self, g: &[T]) -> Vec<T> {
        let mut q: Vec<T> = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y) in self.pairs.iter().rev() {
            let rho = T::one() / dot(y, s);
            let a = rho * dot(s, &q);
            for (qi, &yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push((a, rho));
        }
        if let Some((s, y)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y), (a, rho)) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, &si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    fn current(&mut self, params: &[T], f: &mut LossFn<'_, T>) -> Result<(T, Vec<T>)> {
        if let Some((p, v, g)) = &self.cache {
            if p.len() == params.len() && p.iter().zip(params).all(|(a, b)| a.to_f64().unwrap().to_bits() == b.to_f64().unwrap().to_bits()) {
                return Ok((*v, g.clone()));
            }
        }
        let (v, g) = f(params)?;
        if !v.is_finite() {
            return Err(Error::NumericalFailure { term: "lbfgs".into(), detail: "non-finite loss at current point".into() });
        }
        finite_or_fail("lbfgs", &g)?;
        Ok((v, g))
    }

    pub fn step(&mut self, params: &mut Vec<T>, f: &mut LossFn<'_, T>) -> Result<StepInfo<T>> {
        let (f0, g0) = self.current(params, f)?;
        if g0.iter().all(|&v| v == T::zero()) {
            self.cache = Some((params.clone(), f0, g0));
            return Ok(StepInfo { loss: f0, step: T::zero(), evals: 0, outcome: StepOutcome::Stationary });
        }
        let mut dir = self.direction(&g0);
        let mut dphi0 = dot(&g0, &dir);
        if !(dphi0 < T::zero()) {
            self.pairs.clear();
            dir = g0.iter().map(|&v| -v).collect();
            dphi0 = dot(&g0, &dir);
        }
        // With no curvature information the trial step is normalized so that the
        // first move has length at most `lr` in the 1-norm.
        let alpha0 = if self.pairs.is_empty() {
            let l1: T = g0.iter().map(|v| v.abs()).sum();
            self.lr * (T::one() / l1).min(T::one())
        } else {
            self.lr
        };

        let search = self.line_search(params, &dir, f0, dphi0, alpha0, f)?;
        let (outcome, alpha, f1, g1, evals) = match search {
            Search::Found { alpha, f, g, evals, wolfe } => {
                (if wolfe { StepOutcome::Wolfe } else { StepOutcome::SufficientDecrease }, alpha, f, g, evals)
            }
            Search::Failed { evals } => {
                let gn = dot(&g0, &g0).sqrt();
                let len = self.lr * lit(1e-2);
                let trial: Vec<T> = params.iter().zip(&g0).map(|(&p, &g)| p - len * g / gn).collect();
                let (fv, gv) = f(&trial)?;
                if !fv.is_finite() {
                    return Err(Error::NumericalFailure { term: "lbfgs fallback".into(), detail: "non-finite loss".into() });
                }
                finite_or_fail("lbfgs fallback", &gv)?;
                log::warn!("line search failed after {evals} evaluations; normalized gradient step of length {len}");
                self.pairs.clear();
                *params = trial;
                self.cache = Some((params.clone(), fv, gv));
                return Ok(StepInfo { loss: fv, step: len, evals: evals + 1, outcome: StepOutcome::Fallback });
            }
        };
        let new_params: Vec<T> = params.iter().zip(&dir).map(|(&p, &d)| p + alpha * d).collect();
        let s: Vec<T> = new_params.iter().zip(params.iter()).map(|(&a, &b)| a - b).collect();
        let y: Vec<T> = g1.iter().zip(&g0).map(|(&a, &b)| a - b).collect();
        if dot(&s, &y) > lit(MIN_CURVATURE) {
            if self.pairs.len() == self.history {
                self.pairs.pop_front();
            }
            self.pairs.push_back((s, y));
        }
        *params = new_params;
        self.cache = Some((params.clone(), f1, g1));
        Ok(StepInfo { loss: f1, step: alpha, evals, outcome })
    }

    /// Strong-Wolfe search (bracketing then zoom with safeguarded cubic steps).
    fn line_search(&self, x: &[T], dir: &[T], f0: T, dphi0: T, alpha0: T, f: &mut LossFn<'_, T>) -> Result<Search<T>> {
        let mut evals = 0usize;
        let mut phi = |alpha: T, evals: &mut usize| -> Result<(T, Vec<T>, T)> {
            *evals += 1;
            let trial: Vec<T> = x.iter().zip(dir).map(|(&p, &d)| p + alpha * d).collect();
            let (v, g) = f(&trial)?;
            let dv = if v.is_finite() && g.iter().all(|e| e.is_finite()) { dot(&g, dir) } else { T::nan() };
            Ok((v, g, dv))
        };
        let armijo = |alpha: T, v: T| v <= f0 + self.c1 * alpha * dphi0;
        let curvature = |dv: T| dv.abs() <= -self.c2 * dphi0;
        let mut best: Option<(T, T, Vec<T>)> = None;
        let note = |alpha: T, v: T, g: &Vec<T>, best: &mut Option<(T, T, Vec<T>)>| {
            if v.is_finite() && armijo(alpha, v) && best.as_ref().map_or(true, |b| v < b.1) {
                *best = Some((alpha, v, g.clone()));
            }
        };

        let (mut a_prev, mut f_prev, mut d_prev) = (T::zero(), f0, dphi0);
        let mut alpha = alpha0;
        let mut bracket: Option<((T, T, T), (T, T, T))> = None;
        while evals < self.max_evals {
            let (v, g, dv) = phi(alpha, &mut evals)?;
            note(alpha, v, &g, &mut best);
            if !v.is_finite() || !dv.is_finite() {
                // Overshot into a non-finite region: shrink towards the last good point.
                bracket = Some(((a_prev, f_prev, d_prev), (alpha, T::infinity(), T::nan())));
                break;
            }
            if !armijo(alpha, v) || (evals > 1 && v >= f_prev) {
                bracket = Some(((a_prev, f_prev, d_prev), (alpha, v, dv)));
                break;
            }
            if curvature(dv) {
                return Ok(Search::Found { alpha, f: v, g, evals, wolfe: true });
            }
            if dv >= T::zero() {
                bracket = Some(((alpha, v, dv), (a_prev, f_prev, d_prev)));
                break;
            }
            let lo = alpha + lit::<T>(0.01) * (alpha - a_prev);
            let hi = alpha * lit(10.0);
            let next = cubic_min(a_prev, f_prev, d_prev, alpha, v, dv).map_or(hi, |c| c.max(lo).min(hi));
            a_prev = alpha;
            f_prev = v;
            d_prev = dv;
            alpha = next;
        }

        if let Some(((mut a_lo, mut f_lo, mut d_lo), (mut a_hi, mut f_hi, mut d_hi))) = bracket {
            while evals < self.max_evals {
                let width = (a_hi - a_lo).abs();
                if width <= T::epsilon() * a_lo.abs().max(a_hi.abs()) {
                    break;
                }
                let (lo_b, hi_b) = if a_lo < a_hi { (a_lo, a_hi) } else { (a_hi, a_lo) };
                let margin = lit::<T>(0.1) * width;
                let mut a = if f_hi.is_finite() && d_hi.is_finite() {
                    cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi).unwrap_or((a_lo + a_hi) / lit(2.0))
                } else {
                    (a_lo + a_hi) / lit(2.0)
                };
                if !(a > lo_b + margin && a < hi_b - margin) {
                    a = (a_lo + a_hi) / lit(2.0);
                }
                let (v, g, dv) = phi(a, &mut evals)?;
                note(a, v, &g, &mut best);
                if !v.is_finite() || !dv.is_finite() || !armijo(a, v) || v >= f_lo {
                    a_hi = a;
                    f_hi = if v.is_finite() { v } else { T::infinity() };
                    d_hi = dv;
                } else {
                    if curvature(dv) {
                        return Ok(Search::Found { alpha: a, f: v, g, evals, wolfe: true });
                    }
                    if dv * (a_hi - a_lo) >= T::zero() {
                        a_hi = a_lo;
                        f_hi = f_lo;
                        d_hi = d_lo;
                    }
                    a_lo = a;
                    f_lo = v;
                    d_lo = dv;
                }
            }
        }
        Ok(match best {
            Some((alpha, v, g)) if v < f0 => Search::Found { alpha, f: v, g, evals, wolfe: false },
            _ => Search::Failed { evals },
        })
    }
}

enum Search<T> {
    Found { alpha: T, f: T, g: Vec<T>, evals: usize, wolfe: bool },
    Failed { evals: usize },
}

/// Minimizer of the cubic interpolating values and slopes at two points.
fn cubic_min<T: Scalar>(x1: T, f1: T, g1: T, x2: T, f2: T, g2: T) -> Option<T> {
    let three = lit::<T>(3.0);
    let d1 = g1 + g2 - three * (f1 - f2) / (x1 - x2);
    let disc = d1 * d1 - g1 * g2;
    if !(disc >= T::zero()) {
        return None;
    }
    let d2 = disc.sqrt();
    let sign = if x2 >= x1 { T::one() } else { -T::one() };
    let d2 = sign * d2;
    let den = g2 - g1 + lit::<T>(2.0) * d2;
    if den == T::zero() {
        return None;
    }
    let r = x2 - (x2 - x1) * ((g2 + d2 - d1) / den);
    r.is_finite().then_some(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Adam,
    Lbfgs,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Adam => "adam",
            Phase::Lbfgs => "lbfgs",
        })
    }
}

/// Halve (or scale by `factor`) the learning rate every `every` epochs of a phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrDecay {
    pub every: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub adam_epochs: usize,
    pub lbfgs_epochs: usize,
    pub adam_lr: f64,
    pub lbfgs_lr: f64,
    /// Relative error is computed every `log_every` epochs (and at the last one).
    pub log_every: usize,
    pub decay: Option<LrDecay>,
    /// Checkpoint hook cadence in epochs; 0 checkpoints only at phase ends.
    pub checkpoint_every: usize,
    /// L-BFGS iterations (each a full line search) per L-BFGS epoch. An epoch
    /// ends early on a fallback step.
    pub lbfgs_iters: usize,
    pub lbfgs_history: usize,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { adam_epochs: 5000, lbfgs_epochs: 1000, adam_lr: 3e-3, lbfgs_lr: 0.1, log_every: 100, decay: None, checkpoint_every: 0, lbfgs_iters: 1, lbfgs_history: 10, seed: 0 }
    }
}

impl Schedule {
    pub fn new(adam_epochs: usize, adam_lr: f64, lbfgs_epochs: usize, lbfgs_lr: f64) -> Self {
        Self { adam_epochs, adam_lr, lbfgs_epochs, lbfgs_lr, ..Self::default() }
    }

    pub fn total_epochs(&self) -> usize {
        self.adam_epochs + self.lbfgs_epochs
    }

    fn lr_at(&self, base: f64, epoch_in_phase: usize) -> f64 {
        match self.decay {
            Some(LrDecay { every, factor }) if every > 0 => base * factor.powi((epoch_in_phase / every) as i32),
            _ => base,
        }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch index across both phases.
    pub epoch: usize,
    pub phase: Phase,
    /// Adam rows log the loss at the parameters the step started from; L-BFGS
    /// rows log the loss at the accepted point.
    pub loss: f64,
    pub rel_error: Option<f64>,
    pub wall_ms: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub fallbacks: usize,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    pub fn last_rel_error(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.rel_error)
    }

    pub const CSV_HEADER: &'static str = "epoch,phase,loss,rel_error,wall_ms";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let re = r.rel_error.map(|v| format!("{v:e}")).unwrap_or_default();
            s.push_str(&format!("{},{},{:e},{},{:.3}\n", r.epoch, r.phase, r.loss, re, r.wall_ms));
        }
        s
    }
}

/// Training stopped on an error; `log` holds the epochs completed before it and
/// the parameters were left at the last finite point.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub log: TrainLog,
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "training aborted after {} epochs: {}", self.log.records.len(), self.error)
    }
}

impl std::error::Error for TrainFailure {}

impl From<TrainFailure> for Error {
    fn from(f: TrainFailure) -> Self {
        f.error
    }
}

/// Callbacks observed by [`train_params`].
pub struct Hooks<'a, T> {
    /// Relative error (or any scalar metric) at the given parameters.
    pub monitor: Option<&'a mut dyn FnMut(&[T]) -> Option<f64>>,
    /// Called at phase switch, after the last epoch and every `checkpoint_every` epochs.
    pub checkpoint: Option<&'a mut dyn FnMut(&[T], Phase, usize)>,
}

impl<T> Default for Hooks<'_, T> {
    fn default() -> Self {
        Self { monitor: None, checkpoint: None }
    }
}

/// Runs the schedule on a flat parameter vector.
pub fn train_params<T: Scalar>(
    params: &mut Vec<T>,
    loss: &mut LossFn<'_, T>,
    schedule: &Schedule,
    hooks: Hooks<'_, T>,
) -> std::result::Result<TrainLog, TrainFailure> {
    let Hooks { mut monitor, mut checkpoint } = hooks;
    let start = Instant::now();
    let mut log = TrainLog::default();
    let total = schedule.total_epochs();
    let log_every = schedule.log_every.max(1);
    let mut measure = |p: &[T], epoch: usize| -> Option<f64> {
        if epoch % log_every == 0 || epoch == total {
            monitor.as_mut().and_then(|m| m(p))
        } else {
            None
        }
    };
    let fail = |error: Error, log: TrainLog| TrainFailure { error, log };
    let due = |epoch: usize| schedule.checkpoint_every > 0 && epoch % schedule.checkpoint_every == 0;

    let mut adam = Adam::new(params.len(), T::zero());
    for e in 0..schedule.adam_epochs {
        adam.lr = lit(schedule.lr_at(schedule.adam_lr, e));
        let (v, g) = match loss(params) {
            Ok(r) => r,
            Err(err) => return Err(fail(err, log)),
        };
        if !v.is_finite() {
            return Err(fail(Error::NumericalFailure { term: "loss".into(), detail: format!("non-finite loss at epoch {}", e + 1) }, log));
        }
        let backup = params.clone();
        if let Err(err) = adam.step(params, &g) {
            *params = backup;
            return Err(fail(err, log));
        }
        let epoch = e + 1;
        log.records.push(EpochRecord {
            epoch,
            phase: Phase::Adam,
            loss: v.to_f64().unwrap(),
            rel_error: measure(params, epoch),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            fallback: false,
        });
        if due(epoch) && epoch != schedule.adam_epochs {
            if let Some(cb) = checkpoint.as_mut() {
                cb(params, Phase::Adam, epoch);
            }
        }
    }
    if schedule.adam_epochs > 0 {
        if let Some(cb) = checkpoint.as_mut() {
            cb(params, Phase::Adam, schedule.adam_epochs);
        }
    }

    let mut lbfgs = Lbfgs::new(T::zero());
    lbfgs.history = schedule.lbfgs_history.max(1);
    for e in 0..schedule.lbfgs_epochs {
        lbfgs.lr = lit(schedule.lr_at(schedule.lbfgs_lr, e));
        let backup = params.clone();
        let mut info = None;
        let mut fallback = false;
        for _ in 0..schedule.lbfgs_iters.max(1) {
            let step = match lbfgs.step(params, loss) {
                Ok(i) => i,
                Err(err) => {
                    *params = backup;
                    return Err(fail(err, log));
                }
            };
            fallback = step.outcome == StepOutcome::Fallback;
            log.fallbacks += fallback as usize;
            info = Some(step);
            if fallback {
                break;
            }
        }
        let info = info.expect("at least one iteration");
        let epoch = schedule.adam_epochs + e + 1;
        log.records.push(EpochRecord {
            epoch,
            phase: Phase::Lbfgs,
            loss: info.loss.to_f64().unwrap(),
            rel_error: measure(params, epoch),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            fallback,
        });
        if due(epoch) && epoch != total {
            if let Some(cb) = checkpoint.as_mut() {
                cb(params, Phase::Lbfgs, epoch);
            }
        }
    }
    if schedule.lbfgs_epochs > 0 {
        if let Some(cb) = checkpoint.as_mut() {
            cb(params, Phase::Lbfgs, total);
        }
    }
    Ok(log)
}

/// Trains an FTT model on an [`Objective`]. `monitor` maps the model to its
/// relative error when an exact solution is known.
pub fn train<T: Scalar, O: Objective<T> + ?Sized>(
    model: &mut FttModel<T>,
    objective: &O,
    schedule: &Schedule,
    monitor: Option<&dyn Fn(&FttModel<T>) -> Option<f64>>,
) -> std::result::Result<TrainLog, TrainFailure> {
    let mut params = model.params();
    let mut work = model.clone();
    let mut loss = |p: &[T]| -> Result<(T, Vec<T>)> {
        work.set_params(p)?;
        let (v, g): (T, ParamVector<T>) = objective.value_and_grad(&work)?;
        Ok((v, g.0))
    };
    let mut probe = model.clone();
    let mut mon = |p: &[T]| -> Option<f64> {
        let m = monitor?;
        probe.set_params(p).ok()?;
        m(&probe)
    };
    let hooks = Hooks { monitor: if monitor.is_some() { Some(&mut mon) } else { None }, checkpoint: None };
    let out = train_params(&mut params, &mut loss, schedule, hooks);
    model.set_params(&params).expect("parameter length unchanged");
    out
}
