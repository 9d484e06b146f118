//! Reverse-mode gradients of assembled losses with respect to every core
//! parameter.
//!
//! For a chain `v = D₁ D₂ ⋯ D_d` the adjoint of factor `D_i` is the outer
//! product of the prefix row `D₁⋯D_{i−1}` and the suffix column
//! `D_{i+1}⋯D_d`. Each factor is a weighted sum of Kronecker products of core
//! samples, so its adjoint splits into per-node adjoints of the samples, which
//! the core networks then push back to their weights.

use std::ops::{Deref, DerefMut};

use crate::assembly::{EnergyFunctionals, Functional};
use crate::fttmodel::FttModel;
use crate::linalg::{mat_vec, vec_mat, Mat};
use crate::{lit, Error, Result, Scalar};

/// A flat parameter (or gradient) vector in the model's parameter order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector<T>(pub Vec<T>);

impl<T: Scalar> ParamVector<T> {
    pub fn zeros(n: usize) -> Self {
        Self(vec![T::zero(); n])
    }

    pub fn dot(&self, other: &Self) -> T {
        self.0.iter().zip(&other.0).map(|(&a, &b)| a * b).sum()
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    /// `self += s · other`
    pub fn axpy(&mut self, s: T, other: &Self) {
        for (a, &b) in self.0.iter_mut().zip(&other.0) {
            *a += s * b;
        }
    }

    pub fn scaled(&self, s: T) -> Self {
        Self(self.0.iter().map(|&v| v * s).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl<T> Deref for ParamVector<T> {
    type Target = Vec<T>;
    fn deref(&self) -> &Vec<T> {
        &self.0
    }
}

impl<T> DerefMut for ParamVector<T> {
    fn deref_mut(&mut self) -> &mut Vec<T> {
        &mut self.0
    }
}

impl<T> From<Vec<T>> for ParamVector<T> {
    fn from(v: Vec<T>) -> Self {
        Self(v)
    }
}

fn check_grad<T: Scalar>(term: &str, g: &[T]) -> Result<()> {
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure { term: term.into(), detail: format!("non-finite gradient entry {i}") });
    }
    Ok(())
}

impl<T: Scalar> Functional<T> {
    /// Value and gradient. The value equals [`Functional::evaluate`] bit for bit.
    pub fn value_and_grad(&self, model: &FttModel<T>) -> Result<(T, ParamVector<T>)> {
        let fwd = self.forward(model)?;
        let value = self.sum_forward(&fwd);
        if !value.is_finite() {
            return Err(self.non_finite_error(&fwd));
        }
        let d = self.d;

        // Adjoints of the dimension factors.
        let mut dbar: Vec<Option<Mat<T>>> = vec![None; fwd.factors.len()];
        let mut prefix: Vec<Vec<T>> = vec![Vec::new(); d + 1];
        let mut suffix: Vec<Vec<T>> = vec![Vec::new(); d + 1];
        for mi in 0..self.monomials.len() {
            if self.monomials[mi].degree() == 0 {
                continue;
            }
            let coeff = self.coeffs[mi];
            for ri in 0..self.rules.len() {
                let keys = &self.mono_keys[mi][ri];
                prefix[0] = vec![T::one()];
                for i in 0..d {
                    let m = &fwd.factors[keys[i]];
                    let mut next = vec![T::zero(); m.cols()];
                    vec_mat(&prefix[i], m.as_slice(), m.rows(), m.cols(), &mut next);
                    prefix[i + 1] = next;
                }
                suffix[d] = vec![T::one()];
                for i in (0..d).rev() {
                    let m = &fwd.factors[keys[i]];
                    let mut next = vec![T::zero(); m.rows()];
                    mat_vec(m.as_slice(), m.rows(), m.cols(), &suffix[i + 1], &mut next);
                    suffix[i] = next;
                }
                for i in 0..d {
                    let k = keys[i];
                    let m = &fwd.factors[k];
                    let bar = dbar[k].get_or_insert_with(|| Mat::zeros(m.rows(), m.cols()));
                    let (p, s) = (&prefix[i], &suffix[i + 1]);
                    let data = bar.as_mut_slice();
                    for (a, &pa) in p.iter().enumerate() {
                        let cp = coeff * pa;
                        if cp == T::zero() {
                            continue;
                        }
                        for (b, &sb) in s.iter().enumerate() {
                            data[a * s.len() + b] += cp * sb;
                        }
                    }
                }
            }
        }

        // Adjoints of the sampled core outputs, per rule and dimension.
        let ranks = model.ranks();
        let mut adj: Vec<Vec<[Vec<T>; 3]>> = self
            .rules
            .iter()
            .zip(&self.need)
            .map(|(rule, need)| {
                (0..d)
                    .map(|i| {
                        let m = ranks[i] * ranks[i + 1];
                        let n = rule[i].len();
                        let alloc = |o: usize| if need[i].is_some_and(|mx| o <= mx) { vec![T::zero(); n * m] } else { Vec::new() };
                        [alloc(0), alloc(1), alloc(2)]
                    })
                    .collect()
            })
            .collect();
        for (k, bar) in dbar.iter().enumerate() {
            let Some(bar) = bar else { continue };
            let (ri, i, orders) = &self.keys[k];
            let (r, c) = (ranks[*i], ranks[*i + 1]);
            let m = r * c;
            let w = &self.key_weights[k];
            let bar = bar.as_slice();
            match orders.len() {
                0 => {}
                1 => {
                    let a = &mut adj[*ri][*i][orders[0] as usize];
                    for (node, &wk) in w.iter().enumerate() {
                        for (dst, &b) in a[node * m..(node + 1) * m].iter_mut().zip(bar) {
                            *dst += wk * b;
                        }
                    }
                }
                _ => {
                    let samples = fwd.samples[*ri][*i].as_ref().expect("core sampled");
                    let (oa, ob) = (orders[0] as usize, orders[1] as usize);
                    let va = samples.order(oa);
                    let vb = samples.order(ob);
                    let kc = c * c;
                    let mut ga = vec![T::zero(); m];
                    let mut gb = vec![T::zero(); m];
                    for (node, &wk) in w.iter().enumerate() {
                        if wk == T::zero() {
                            continue;
                        }
                        let an = &va[node * m..(node + 1) * m];
                        let bn = &vb[node * m..(node + 1) * m];
                        ga.iter_mut().for_each(|v| *v = T::zero());
                        gb.iter_mut().for_each(|v| *v = T::zero());
                        // K[(a·r + b), (p·c + q)] = A[a, p] · B[b, q]
                        for a in 0..r {
                            for b in 0..r {
                                let row = (a * r + b) * kc;
                                for p in 0..c {
                                    let apv = an[a * c + p];
                                    for q in 0..c {
                                        let kb = bar[row + p * c + q];
                                        ga[a * c + p] += kb * bn[b * c + q];
                                        gb[b * c + q] += kb * apv;
                                    }
                                }
                            }
                        }
                        let dst = &mut adj[*ri][*i][oa][node * m..(node + 1) * m];
                        for (x, &g) in dst.iter_mut().zip(&ga) {
                            *x += wk * g;
                        }
                        let dst = &mut adj[*ri][*i][ob][node * m..(node + 1) * m];
                        for (x, &g) in dst.iter_mut().zip(&gb) {
                            *x += wk * g;
                        }
                    }
                }
            }
        }

        let offs = model.param_offsets();
        let mut grad = ParamVector::zeros(model.param_count());
        for (ri, rule) in self.rules.iter().enumerate() {
            for i in 0..d {
                let Some(samples) = fwd.samples[ri][i].as_ref() else { continue };
                let a = &adj[ri][i];
                model.cores()[i].backprop(
                    &rule[i].nodes,
                    samples,
                    [&a[0], &a[1], &a[2]],
                    &mut grad[offs[i]..offs[i + 1]],
                );
            }
        }
        check_grad("functional", &grad)?;
        Ok((value, grad))
    }
}

/// Anything the optimizers can minimize over the model parameters.
pub trait Objective<T: Scalar> {
    fn value_and_grad(&self, model: &FttModel<T>) -> Result<(T, ParamVector<T>)>;

    fn value(&self, model: &FttModel<T>) -> Result<T> {
        Ok(self.value_and_grad(model)?.0)
    }
}

/// `Σ_j weight_j · F_j`, e.g. the residual plus a penalized boundary term.
#[derive(Debug, Clone)]
pub struct WeightedSum<T> {
    pub terms: Vec<(T, Functional<T>)>,
}

impl<T: Scalar> WeightedSum<T> {
    pub fn single(f: Functional<T>) -> Self {
        Self { terms: vec![(T::one(), f)] }
    }

    pub fn with(mut self, weight: T, f: Functional<T>) -> Self {
        self.terms.push((weight, f));
        self
    }

    /// Weighted value of each term.
    pub fn parts(&self, model: &FttModel<T>) -> Result<Vec<T>> {
        self.terms.iter().map(|(w, f)| Ok(*w * f.evaluate(model)?)).collect()
    }
}

impl<T: Scalar> Objective<T> for WeightedSum<T> {
    fn value_and_grad(&self, model: &FttModel<T>) -> Result<(T, ParamVector<T>)> {
        let mut total = T::zero();
        let mut grad = ParamVector::zeros(model.param_count());
        for (w, f) in &self.terms {
            let (v, g) = f.value_and_grad(model)?;
            total += *w * v;
            grad.axpy(*w, &g);
        }
        Ok((total, grad))
    }

    fn value(&self, model: &FttModel<T>) -> Result<T> {
        let mut total = T::zero();
        for (w, f) in &self.terms {
            total += *w * f.evaluate(model)?;
        }
        Ok(total)
    }
}

/// Denominators below this make the Rayleigh quotient undefined.
pub const MIN_MASS: f64 = 1e-12;

/// `λ(θ) = (∫|∇u|² + ∫V u²) / ∫u²`.
#[derive(Debug, Clone)]
pub struct RayleighQuotient<T>(pub EnergyFunctionals<T>);

impl<T: Scalar> RayleighQuotient<T> {
    fn mass_guard(&self, mass: T) -> Result<()> {
        if !(mass >= lit(MIN_MASS)) {
            return Err(Error::DegenerateModel(format!("∫u² = {mass} is below {MIN_MASS:e}")));
        }
        Ok(())
    }
}

impl<T: Scalar> Objective<T> for RayleighQuotient<T> {
    fn value_and_grad(&self, model: &FttModel<T>) -> Result<(T, ParamVector<T>)> {
        let (dv, dg) = self.0.dirichlet.value_and_grad(model)?;
        let (pv, pg) = self.0.potential.value_and_grad(model)?;
        let (mv, mg) = self.0.mass.value_and_grad(model)?;
        self.mass_guard(mv)?;
        let lambda = (dv + pv) / mv;
        let mut g = dg;
        g.axpy(T::one(), &pg);
        g.axpy(-lambda, &mg);
        let g = g.scaled(T::one() / mv);
        check_grad("rayleigh quotient", &g)?;
        Ok((lambda, g))
    }

    fn value(&self, model: &FttModel<T>) -> Result<T> {
        let n = self.0.dirichlet.evaluate(model)? + self.0.potential.evaluate(model)?;
        let m = self.0.mass.evaluate(model)?;
        self.mass_guard(m)?;
        Ok(n / m)
    }
}

/// Mean squared error `(1/n) Σ_p (u(x_p) − y_p)²` on a fixed sample.
#[derive(Debug, Clone)]
pub struct Supervised<T> {
    /// Coordinates stored per dimension: `columns[i][p]` is `x_{p,i}`.
    columns: Vec<Vec<T>>,
    targets: Vec<T>,
}

impl<T: Scalar> Supervised<T> {
    pub fn new(points: &[Vec<T>], targets: Vec<T>) -> Result<Self> {
        if points.is_empty() || points.len() != targets.len() {
            return Err(Error::shape(format!("{} points, {} targets", points.len(), targets.len())));
        }
        let d = points[0].len();
        if points.iter().any(|p| p.len() != d) {
            return Err(Error::shape("points of mixed dimension"));
        }
        let columns = (0..d).map(|i| points.iter().map(|p| p[i]).collect()).collect();
        Ok(Self { columns, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn compute(&self, model: &FttModel<T>, want_grad: bool) -> Result<(T, Option<ParamVector<T>>)> {
        let d = model.dim();
        if self.columns.len() != d {
            return Err(Error::shape(format!("data is {}-dimensional, model {d}", self.columns.len())));
        }
        let ranks = model.ranks();
        let samples: Vec<_> = model.cores().iter().zip(&self.columns).map(|(c, col)| c.eval_nodes(col, 0)).collect();
        let n = self.len();
        let scale = lit::<T>(2.0) / lit(n as f64);
        let mut adj: Vec<Vec<T>> = if want_grad {
            (0..d).map(|i| vec![T::zero(); n * ranks[i] * ranks[i + 1]]).collect()
        } else {
            Vec::new()
        };
        let mut total = T::zero();
        let mut prefix: Vec<Vec<T>> = vec![Vec::new(); d + 1];
        let mut suffix: Vec<Vec<T>> = vec![Vec::new(); d + 1];
        for p in 0..n {
            prefix[0] = vec![T::one()];
            for i in 0..d {
                let (r, c) = (ranks[i], ranks[i + 1]);
                let mut next = vec![T::zero(); c];
                vec_mat(&prefix[i], &samples[i].order(0)[p * r * c..(p + 1) * r * c], r, c, &mut next);
                prefix[i + 1] = next;
            }
            let res = prefix[d][0] - self.targets[p];
            total += res * res;
            if !want_grad {
                continue;
            }
            suffix[d] = vec![T::one()];
            for i in (0..d).rev() {
                let (r, c) = (ranks[i], ranks[i + 1]);
                let mut next = vec![T::zero(); r];
                mat_vec(&samples[i].order(0)[p * r * c..(p + 1) * r * c], r, c, &suffix[i + 1], &mut next);
                suffix[i] = next;
            }
            let g = scale * res;
            for i in 0..d {
                let c = ranks[i + 1];
                let dst = &mut adj[i][p * ranks[i] * c..(p + 1) * ranks[i] * c];
                for (a, &pa) in prefix[i].iter().enumerate() {
                    for (b, &sb) in suffix[i + 1].iter().enumerate() {
                        dst[a * c + b] += g * pa * sb;
                    }
                }
            }
        }
        let value = total / lit(n as f64);
        if !value.is_finite() {
            return Err(Error::NumericalFailure { term: "supervised loss".into(), detail: "non-finite value".into() });
        }
        if !want_grad {
            return Ok((value, None));
        }
        let offs = model.param_offsets();
        let mut grad = ParamVector::zeros(model.param_count());
        for i in 0..d {
            model.cores()[i].backprop(&self.columns[i], &samples[i], [&adj[i], &[], &[]], &mut grad[offs[i]..offs[i + 1]]);
        }
        check_grad("supervised loss", &grad)?;
        Ok((value, Some(grad)))
    }
}

impl<T: Scalar> Objective<T> for Supervised<T> {
    fn value_and_grad(&self, model: &FttModel<T>) -> Result<(T, ParamVector<T>)> {
        let (v, g) = self.compute(model, true)?;
        Ok((v, g.expect("gradient requested")))
    }

    fn value(&self, model: &FttModel<T>) -> Result<T> {
        Ok(self.compute(model, false)?.0)
    }
}

/// Central finite-difference gradient, for checks.
pub fn finite_difference<T: Scalar, O: Objective<T> + ?Sized>(obj: &O, model: &FttModel<T>, h: T) -> Result<ParamVector<T>> {
    let base = model.params();
    let mut work = model.clone();
    let mut g = ParamVector::zeros(base.len());
    let mut p = base.clone();
    for j in 0..base.len() {
        p[j] = base[j] + h;
        work.set_params(&p)?;
        let up = obj.value(&work)?;
        p[j] = base[j] - h;
        work.set_params(&p)?;
        let down = obj.value(&work)?;
        p[j] = base[j];
        g[j] = (up - down) / (lit::<T>(2.0) * h);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::*;
    use crate::corenet::InitScheme;
    use crate::fttmodel::ModelShape;
    use crate::quadrature::Interval;
    use std::f64::consts::PI;

    fn model(d: usize, r: usize, h: usize, hard: bool, seed: u64) -> FttModel<f64> {
        let b = if hard { Some(Interval::new(0.0, 1.0).unwrap()) } else { None };
        FttModel::new(&ModelShape::uniform(d, r, h, vec![b; d]), InitScheme::GlorotUniform, seed).unwrap()
    }

    fn helmholtz_op(d: usize) -> EllipticOperator {
        EllipticOperator {
            c1: 1.0,
            b: SeparableField::constant(d, -1.0),
            f: SeparableField::new(vec![FieldTerm::new(4.0 * PI * PI * d as f64 - 1.0, vec![Factor::sin(2.0 * PI); d])]).unwrap(),
        }
    }

    fn rel_close(a: &ParamVector<f64>, b: &ParamVector<f64>, tol: f64) {
        let scale = b.norm().max(1e-8);
        let mut diff = a.clone();
        diff.axpy(-1.0, b);
        assert!(diff.norm() / scale < tol, "relative gradient error {}", diff.norm() / scale);
    }

    #[test]
    fn residual_gradient_matches_finite_differences() {
        for (d, r, hard) in [(2, 2, false), (3, 2, true), (3, 3, false)] {
            let m = model(d, r, 3, hard, 11 + d as u64);
            let rules = volume_rules::<f64>(&BoxDomain::cube(d, 0.0, 1.0).unwrap(), &QuadSpec::uniform(d, 3, 5)).unwrap();
            let obj = WeightedSum::single(residual_functional(&helmholtz_op(d), d, rules).unwrap());
            let (v, g) = obj.value_and_grad(&m).unwrap();
            assert_eq!(v, obj.value(&m).unwrap());
            let fd = finite_difference(&obj, &m, 1e-6).unwrap();
            rel_close(&g, &fd, 1e-6);
        }
    }

    #[test]
    fn boundary_gradient_matches_finite_differences() {
        let d = 2;
        let m = model(d, 2, 3, false, 5);
        let g_field = SeparableField::new(vec![FieldTerm::new(0.5, vec![Factor::cos(1.0), Factor::Exp { amp: 1.0, rate: 0.3 }])]).unwrap();
        let obj = WeightedSum::single(boundary_functional::<f64>(&BoxDomain::cube(d, -1.0, 1.0).unwrap(), 0.25, &g_field).unwrap());
        let (_, g) = obj.value_and_grad(&m).unwrap();
        rel_close(&g, &finite_difference(&obj, &m, 1e-6).unwrap(), 1e-6);
    }

    #[test]
    fn rayleigh_gradient_matches_finite_differences() {
        let d = 3;
        let m = model(d, 2, 3, false, 21);
        let pot = SeparableField::new(
            (0..d)
                .map(|i| {
                    let mut f = vec![Factor::Const(1.0); d];
                    f[i] = Factor::Cos { amp: 1.0, freq: PI, phase: PI };
                    FieldTerm::new(1.0 / d as f64, f)
                })
                .collect(),
        )
        .unwrap();
        let rules = volume_rules::<f64>(&BoxDomain::cube(d, -1.0, 1.0).unwrap(), &QuadSpec::uniform(d, 3, 5)).unwrap();
        let obj = RayleighQuotient(energy_functionals(&pot, d, rules).unwrap());
        let (v, g) = obj.value_and_grad(&m).unwrap();
        assert!((v - obj.value(&m).unwrap()).abs() < 1e-14 * v.abs());
        rel_close(&g, &finite_difference(&obj, &m, 1e-6).unwrap(), 1e-6);
    }

    #[test]
    fn rayleigh_rejects_zero_model() {
        let d = 2;
        let m = FttModel::<f64>::new(&ModelShape::uniform(d, 2, 3, vec![None; d]), InitScheme::Zeros, 0).unwrap();
        let rules = volume_rules::<f64>(&BoxDomain::cube(d, -1.0, 1.0).unwrap(), &QuadSpec::uniform(d, 2, 3)).unwrap();
        let obj = RayleighQuotient(energy_functionals(&SeparableField::zero(), d, rules).unwrap());
        assert!(matches!(obj.value_and_grad(&m), Err(Error::DegenerateModel(_))));
    }

    #[test]
    fn supervised_gradient_matches_finite_differences() {
        let d = 3;
        let m = model(d, 2, 4, false, 9);
        let pts: Vec<Vec<f64>> = (0..40).map(|p| (0..d).map(|i| ((p * 7 + i * 3) % 11) as f64 / 5.5 - 1.0).collect()).collect();
        let ys: Vec<f64> = pts.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let obj = Supervised::new(&pts, ys).unwrap();
        let (v, g) = obj.value_and_grad(&m).unwrap();
        assert_eq!(v, obj.value(&m).unwrap());
        rel_close(&g, &finite_difference(&obj, &m, 1e-6).unwrap(), 1e-6);
    }

    #[test]
    fn weighted_sum_is_linear() {
        let d = 2;
        let m = model(d, 2, 4, false, 2);
        let rules = volume_rules::<f64>(&BoxDomain::cube(d, 0.0, 1.0).unwrap(), &QuadSpec::uniform(d, 3, 4)).unwrap();
        let res = residual_functional(&helmholtz_op(d), d, rules).unwrap();
        let bnd = boundary_functional::<f64>(&BoxDomain::cube(d, 0.0, 1.0).unwrap(), 0.1, &SeparableField::zero()).unwrap();
        let (a, ga) = WeightedSum::single(res.clone()).value_and_grad(&m).unwrap();
        let (b, gb) = WeightedSum::single(bnd.clone()).value_and_grad(&m).unwrap();
        let (c, gc) = WeightedSum::single(res).with(7.0, bnd).value_and_grad(&m).unwrap();
        assert!((c - (a + 7.0 * b)).abs() <= 1e-12 * c.abs());
        let mut expect = ga;
        expect.axpy(7.0, &gb);
        rel_close(&gc, &expect, 1e-13);
    }

    #[test]
    fn gradient_is_deterministic() {
        let d = 3;
        let m = model(d, 3, 5, true, 4);
        let rules = volume_rules::<f64>(&BoxDomain::cube(d, 0.0, 1.0).unwrap(), &QuadSpec::uniform(d, 4, 4)).unwrap();
        let f = residual_functional(&helmholtz_op(d), d, rules).unwrap();
        let a = f.value_and_grad(&m).unwrap();
        let b = f.value_and_grad(&m).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert!(a.1.iter().zip(b.1.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn single_precision_gradient() {
        let d = 2;
        let m64 = model(d, 2, 3, false, 3);
        let m32 = FttModel::<f32>::from_bytes(&m64.to_bytes()).unwrap();
        let dom = BoxDomain::cube(d, 0.0, 1.0).unwrap();
        let f64_ = residual_functional(&helmholtz_op(d), d, volume_rules::<f64>(&dom, &QuadSpec::uniform(d, 3, 4)).unwrap()).unwrap();
        let f32_ = residual_functional(&helmholtz_op(d), d, volume_rules::<f32>(&dom, &QuadSpec::uniform(d, 3, 4)).unwrap()).unwrap();
        let (v64, g64) = f64_.value_and_grad(&m64).unwrap();
        let (v32, g32) = f32_.value_and_grad(&m32).unwrap();
        assert!(((v32 as f64) - v64).abs() < 1e-3 * v64.abs());
        let g32: ParamVector<f64> = g32.iter().map(|&v| v as f64).collect::<Vec<_>>().into();
        rel_close(&g32, &g64, 1e-3);
    }
}
