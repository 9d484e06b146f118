//! The per-dimension core network `u_i(x_i)`: a one-hidden-layer sine network
//! mapping a scalar to an `r_{i−1}×r_i` matrix, optionally multiplied by the
//! boundary factor `q(x) = (x − a)(b − x)` so that it vanishes at both ends.
//!
//! First and second input derivatives are exact:
//!
//! ```text
//! φ(x)   = W₂ sin(w₁x + b₁) + b₂
//! φ'(x)  = W₂ (w₁ ∘ cos(w₁x + b₁))
//! φ''(x) = −W₂ (w₁² ∘ sin(w₁x + b₁))
//! (qφ)'' = q''φ + 2q'φ' + qφ''
//! ```
//!
//! Flat parameter order is `w₁, b₁, W₂ (row-major, output × hidden), b₂`.

use rand::Rng as _;

use crate::linalg::Mat;
use crate::quadrature::Interval;
use crate::rng::Rng;
use crate::{lit, Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitScheme {
    /// Glorot-uniform weights; the first layer (weights and biases) scaled by π.
    #[default]
    GlorotUniform,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoreNetwork<T> {
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    rows: usize,
    cols: usize,
    boundary: Option<Interval<T>>,
}

/// Core values at a set of nodes, for derivative orders `0..=max_order`.
/// `values[o]` is `n_nodes × (rows·cols)` row-major.
#[derive(Debug, Clone)]
pub struct CoreSamples<T> {
    pub max_order: usize,
    pub values: [Vec<T>; 3],
    sin: Vec<T>,
    cos: Vec<T>,
}

impl<T> CoreSamples<T> {
    pub fn order(&self, o: usize) -> &[T] {
        &self.values[o]
    }
}

impl<T: Scalar> CoreNetwork<T> {
    pub fn zeros(rows: usize, cols: usize, hidden: usize, boundary: Option<Interval<T>>) -> Result<Self> {
        if rows == 0 || cols == 0 || hidden == 0 {
            return Err(Error::invalid(format!(
                "core dimensions must be positive (rows={rows}, cols={cols}, hidden={hidden})"
            )));
        }
        let m = rows * cols;
        Ok(Self {
            w1: vec![T::zero(); hidden],
            b1: vec![T::zero(); hidden],
            w2: vec![T::zero(); m * hidden],
            b2: vec![T::zero(); m],
            rows,
            cols,
            boundary,
        })
    }

    pub fn init(
        rows: usize,
        cols: usize,
        hidden: usize,
        boundary: Option<Interval<T>>,
        scheme: InitScheme,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut net = Self::zeros(rows, cols, hidden, boundary)?;
        if scheme == InitScheme::Zeros {
            return Ok(net);
        }
        let m = (rows * cols) as f64;
        let h = hidden as f64;
        let pi = std::f64::consts::PI;
        let lim1 = (6.0 / (1.0 + h)).sqrt() * pi;
        let lim2 = (6.0 / (h + m)).sqrt();
        let lim_b2 = 1.0 / h.sqrt();
        for v in net.w1.iter_mut() {
            *v = lit(rng.gen_range(-lim1..lim1));
        }
        for v in net.b1.iter_mut() {
            *v = lit(rng.gen_range(-pi..pi));
        }
        for v in net.w2.iter_mut() {
            *v = lit(rng.gen_range(-lim2..lim2));
        }
        for v in net.b2.iter_mut() {
            *v = lit(rng.gen_range(-lim_b2..lim_b2));
        }
        Ok(net)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn hidden(&self) -> usize {
        self.w1.len()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn boundary(&self) -> Option<Interval<T>> {
        self.boundary
    }

    pub fn set_boundary(&mut self, boundary: Option<Interval<T>>) {
        self.boundary = boundary;
    }

    /// `h + h + rows·cols·h + rows·cols`.
    pub fn param_count(&self) -> usize {
        let h = self.hidden();
        let m = self.out_dim();
        2 * h + m * h + m
    }

    pub fn write_params(&self, out: &mut [T]) {
        let h = self.hidden();
        let m = self.out_dim();
        out[..h].copy_from_slice(&self.w1);
        out[h..2 * h].copy_from_slice(&self.b1);
        out[2 * h..2 * h + m * h].copy_from_slice(&self.w2);
        out[2 * h + m * h..2 * h + m * h + m].copy_from_slice(&self.b2);
    }

    pub fn read_params(&mut self, src: &[T]) -> Result<()> {
        if src.len() != self.param_count() {
            return Err(Error::shape(format!(
                "core expects {} parameters, got {}",
                self.param_count(),
                src.len()
            )));
        }
        let h = self.hidden();
        let m = self.out_dim();
        self.w1.copy_from_slice(&src[..h]);
        self.b1.copy_from_slice(&src[h..2 * h]);
        self.w2.copy_from_slice(&src[2 * h..2 * h + m * h]);
        self.b2.copy_from_slice(&src[2 * h + m * h..]);
        Ok(())
    }

    /// `(q, q', q'')` of the boundary factor, or `(1, 0, 0)` without one.
    #[inline]
    fn boundary_factor(&self, x: T) -> (T, T, T) {
        match self.boundary {
            Some(iv) => ((x - iv.a) * (iv.b - x), iv.a + iv.b - lit::<T>(2.0) * x, lit(-2.0)),
            None => (T::one(), T::zero(), T::zero()),
        }
    }

    /// Value (`order = 0`) or exact input derivative (`order = 1, 2`) at `x`.
    pub fn eval(&self, x: T, order: usize) -> Result<Mat<T>> {
        if order > 2 {
            return Err(Error::invalid(format!("derivative order {order} not supported (max 2)")));
        }
        if let Some(iv) = self.boundary {
            if !iv.contains_closed(x) {
                return Err(Error::invalid(format!("x = {x} outside core interval [{}, {}]", iv.a, iv.b)));
            }
        }
        let s = self.eval_nodes(&[x], order);
        Mat::from_vec(self.rows, self.cols, s.values[order].clone())
    }

    /// Evaluates orders `0..=max_order` at every node.
    pub fn eval_nodes(&self, nodes: &[T], max_order: usize) -> CoreSamples<T> {
        let h = self.hidden();
        let m = self.out_dim();
        let n = nodes.len();
        let mut sin = vec![T::zero(); n * h];
        let mut cos = vec![T::zero(); n * h];
        for (k, &x) in nodes.iter().enumerate() {
            for j in 0..h {
                let z = self.w1[j] * x + self.b1[j];
                sin[k * h + j] = z.sin();
                cos[k * h + j] = z.cos();
            }
        }
        let mut phi = [vec![T::zero(); n * m], Vec::new(), Vec::new()];
        if max_order >= 1 {
            phi[1] = vec![T::zero(); n * m];
        }
        if max_order >= 2 {
            phi[2] = vec![T::zero(); n * m];
        }
        let mut g1 = vec![T::zero(); h];
        let mut g2 = vec![T::zero(); h];
        for k in 0..n {
            let s = &sin[k * h..(k + 1) * h];
            let c = &cos[k * h..(k + 1) * h];
            for j in 0..h {
                let w = self.w1[j];
                g1[j] = w * c[j];
                g2[j] = -w * w * s[j];
            }
            for o in 0..m {
                let row = &self.w2[o * h..(o + 1) * h];
                phi[0][k * m + o] = row.iter().zip(s).map(|(&a, &b)| a * b).sum::<T>() + self.b2[o];
                if max_order >= 1 {
                    phi[1][k * m + o] = row.iter().zip(&g1).map(|(&a, &b)| a * b).sum();
                }
                if max_order >= 2 {
                    phi[2][k * m + o] = row.iter().zip(&g2).map(|(&a, &b)| a * b).sum();
                }
            }
        }
        if self.boundary.is_some() {
            let two = lit::<T>(2.0);
            for (k, &x) in nodes.iter().enumerate() {
                let (q, dq, ddq) = self.boundary_factor(x);
                for o in 0..m {
                    let i = k * m + o;
                    let p0 = phi[0][i];
                    if max_order >= 2 {
                        let p1 = phi[1][i];
                        phi[2][i] = ddq * p0 + two * dq * p1 + q * phi[2][i];
                    }
                    if max_order >= 1 {
                        phi[1][i] = dq * p0 + q * phi[1][i];
                    }
                    phi[0][i] = q * p0;
                }
            }
        }
        CoreSamples { max_order, values: phi, sin, cos }
    }

    /// Accumulates into `grad` (this core's parameter slice) the parameter
    /// gradient given adjoints of the sampled outputs. `adjoints[o]` must be
    /// `n_nodes × (rows·cols)` or empty when order `o` received no adjoint.
    pub fn backprop(&self, nodes: &[T], samples: &CoreSamples<T>, adjoints: [&[T]; 3], grad: &mut [T]) {
        let h = self.hidden();
        let m = self.out_dim();
        let two = lit::<T>(2.0);
        let (gw1, rest) = grad.split_at_mut(h);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(m * h);
        let mut pbar = [vec![T::zero(); m], vec![T::zero(); m], vec![T::zero(); m]];
        let mut t = [vec![T::zero(); h], vec![T::zero(); h], vec![T::zero(); h]];
        let has = [!adjoints[0].is_empty(), !adjoints[1].is_empty(), !adjoints[2].is_empty()];
        for (k, &x) in nodes.iter().enumerate() {
            let a0 = |o: usize| if has[0] { adjoints[0][k * m + o] } else { T::zero() };
            let a1 = |o: usize| if has[1] { adjoints[1][k * m + o] } else { T::zero() };
            let a2 = |o: usize| if has[2] { adjoints[2][k * m + o] } else { T::zero() };
            let (q, dq, ddq) = self.boundary_factor(x);
            let mut any = false;
            for o in 0..m {
                let (u0, u1, u2) = (a0(o), a1(o), a2(o));
                pbar[0][o] = q * u0 + dq * u1 + ddq * u2;
                pbar[1][o] = q * u1 + two * dq * u2;
                pbar[2][o] = q * u2;
                any |= pbar[0][o] != T::zero() || pbar[1][o] != T::zero() || pbar[2][o] != T::zero();
            }
            if !any {
                continue;
            }
            let s = &samples.sin[k * h..(k + 1) * h];
            let c = &samples.cos[k * h..(k + 1) * h];
            for tt in t.iter_mut() {
                tt.iter_mut().for_each(|v| *v = T::zero());
            }
            for o in 0..m {
                gb2[o] += pbar[0][o];
                let row = &self.w2[o * h..(o + 1) * h];
                let grow = &mut gw2[o * h..(o + 1) * h];
                let (p0, p1, p2) = (pbar[0][o], pbar[1][o], pbar[2][o]);
                for j in 0..h {
                    let w = self.w1[j];
                    grow[j] += p0 * s[j] + p1 * w * c[j] - p2 * w * w * s[j];
                    t[0][j] += p0 * row[j];
                    t[1][j] += p1 * row[j];
                    t[2][j] += p2 * row[j];
                }
            }
            for j in 0..h {
                let w = self.w1[j];
                let (sj, cj) = (s[j], c[j]);
                // d/dz of sin, w·cos and −w²·sin, plus the explicit w-dependence.
                let dz = t[0][j] * cj - t[1][j] * w * sj - t[2][j] * w * w * cj;
                gw1[j] += dz * x + t[1][j] * cj - t[2][j] * two * w * sj;
                gb1[j] += dz;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn random_net(rows: usize, cols: usize, h: usize, boundary: Option<Interval<f64>>, seed: u64) -> CoreNetwork<f64> {
        let mut rng = rng_for(seed, 0, 0);
        CoreNetwork::init(rows, cols, h, boundary, InitScheme::GlorotUniform, &mut rng).unwrap()
    }

    #[test]
    fn constant_network() {
        let mut net = CoreNetwork::<f64>::zeros(2, 3, 5, None).unwrap();
        net.b2 = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        for x in [-3.0, 0.0, 0.7] {
            let v = net.eval(x, 0).unwrap();
            assert_eq!(v.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
            assert!(net.eval(x, 2).unwrap().max_abs() == 0.0);
        }
    }

    #[test]
    fn boundary_factor_vanishes_at_endpoints() {
        let iv = Interval::new(0.0, 1.0).unwrap();
        let net = random_net(2, 2, 7, Some(iv), 3);
        assert_eq!(net.eval(0.0, 0).unwrap().max_abs(), 0.0);
        assert_eq!(net.eval(1.0, 0).unwrap().max_abs(), 0.0);
        assert!(net.eval(1.5, 0).is_err());
    }

    #[test]
    fn order_three_rejected() {
        let net = random_net(1, 1, 3, None, 1);
        assert!(net.eval(0.1, 3).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let iv = Interval::new(-1.0, 1.0).unwrap();
        for trial in 0..100u64 {
            let boundary = if trial % 2 == 0 { Some(iv) } else { None };
            let net = random_net(2, 3, 6, boundary, trial);
            let x = -0.9 + 1.8 * ((trial as f64 * 0.618_033_988_7) % 1.0);
            let f = |x: f64| net.eval(x, 0).unwrap();
            let d1 = net.eval(x, 1).unwrap();
            let d2 = net.eval(x, 2).unwrap();
            let h1 = 1e-5;
            let h2 = 1e-4;
            let (fp, fm, f0) = (f(x + h1), f(x - h1), f(x));
            let (gp, gm) = (f(x + h2), f(x - h2));
            for o in 0..6 {
                let fd1 = (fp.as_slice()[o] - fm.as_slice()[o]) / (2.0 * h1);
                let fd2 = (gp.as_slice()[o] - 2.0 * f0.as_slice()[o] + gm.as_slice()[o]) / (h2 * h2);
                let e1 = (d1.as_slice()[o] - fd1).abs() / fd1.abs().max(1e-8).max(1.0);
                let e2 = (d2.as_slice()[o] - fd2).abs() / fd2.abs().max(1e-8).max(1.0);
                assert!(e1 < 1e-5, "order 1 trial {trial}: {e1}");
                assert!(e2 < 1e-5, "order 2 trial {trial}: {e2}");
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_counts_parameters() {
        let a = random_net(1, 2, 50, None, 42);
        let b = random_net(1, 2, 50, None, 42);
        assert_eq!(a, b);
        assert_eq!(a.param_count(), 50 + 50 + 2 * 50 + 2);
        assert_eq!(CoreNetwork::<f64>::zeros(1, 1, 1, None).unwrap().param_count(), 4);
        let small = CoreNetwork::<f64>::zeros(2, 2, 10, None).unwrap();
        let big = CoreNetwork::<f64>::zeros(2, 2, 20, None).unwrap();
        assert_eq!(big.param_count() - small.param_count(), 2 * 10 + 4 * 10);
    }

    #[test]
    fn zero_scheme_evaluates_to_zero() {
        let mut rng = rng_for(0, 0, 0);
        let net = CoreNetwork::<f64>::init(3, 2, 8, None, InitScheme::Zeros, &mut rng).unwrap();
        for x in [-1.0, 0.2, 5.0] {
            assert_eq!(net.eval(x, 0).unwrap().max_abs(), 0.0);
        }
    }

    #[test]
    fn no_overflow_for_bounded_parameters() {
        let mut net = random_net(2, 2, 10, Some(Interval::new(-1.0, 1.0).unwrap()), 9);
        for (i, v) in net.w1.iter_mut().enumerate() {
            *v = if i % 2 == 0 { 100.0 } else { -100.0 };
        }
        net.w2.iter_mut().for_each(|v| *v = 100.0);
        let nodes: Vec<f64> = (0..1000).map(|i| -1.0 + 2.0 * i as f64 / 999.0).collect();
        let s = net.eval_nodes(&nodes, 2);
        assert!(s.values.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn parameter_round_trip() {
        let net = random_net(2, 1, 4, None, 5);
        let mut flat = vec![0.0; net.param_count()];
        net.write_params(&mut flat);
        let mut other = CoreNetwork::<f64>::zeros(2, 1, 4, None).unwrap();
        other.read_params(&flat).unwrap();
        assert_eq!(net, other);
        assert!(other.read_params(&flat[1..]).is_err());
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let iv = Interval::new(0.0, 2.0).unwrap();
        let net = random_net(2, 2, 5, Some(iv), 11);
        let nodes = [0.3, 1.1, 1.7];
        // Scalar functional: Σ_k Σ_o c_{k,o,ord} · φ^{(ord)}_o(x_k).
        let coef: Vec<Vec<f64>> = (0..3)
            .map(|ord| (0..12).map(|i| ((i * 7 + ord * 3) % 5) as f64 - 2.0).collect())
            .collect();
        let functional = |n: &CoreNetwork<f64>| {
            let s = n.eval_nodes(&nodes, 2);
            (0..3).map(|o| s.values[o].iter().zip(&coef[o]).map(|(a, b)| a * b).sum::<f64>()).sum::<f64>()
        };
        let s = net.eval_nodes(&nodes, 2);
        let mut grad = vec![0.0; net.param_count()];
        net.backprop(&nodes, &s, [&coef[0], &coef[1], &coef[2]], &mut grad);
        let mut flat = vec![0.0; net.param_count()];
        net.write_params(&mut flat);
        for p in 0..flat.len() {
            let eps = 1e-6;
            let mut plus = net.clone();
            let mut fp = flat.clone();
            fp[p] += eps;
            plus.read_params(&fp).unwrap();
            let mut minus = net.clone();
            let mut fm = flat.clone();
            fm[p] -= eps;
            minus.read_params(&fm).unwrap();
            let fd = (functional(&plus) - functional(&minus)) / (2.0 * eps);
            assert!((grad[p] - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "param {p}: {} vs {fd}", grad[p]);
        }
    }
}
