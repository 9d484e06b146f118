//! Gauss–Legendre rules and composite rules over intervals.
//!
//! Nodes are the roots of the Legendre polynomial `P_n`, found by Newton
//! iteration from Chebyshev-like initial guesses. Only the non-negative half is
//! iterated; the other half is mirrored so the rule is exactly symmetric.

use crate::{lit, Error, Result, Scalar};

/// A bounded open interval `(a, b)` with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval<T> {
    pub a: T,
    pub b: T,
}

impl<T: Scalar> Interval<T> {
    pub fn new(a: T, b: T) -> Result<Self> {
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(Error::invalid(format!("degenerate interval ({a}, {b})")));
        }
        Ok(Self { a, b })
    }

    #[inline]
    pub fn length(&self) -> T {
        self.b - self.a
    }

    #[inline]
    pub fn contains_closed(&self, x: T) -> bool {
        x >= self.a && x <= self.b
    }

    pub fn cast<U: Scalar>(&self) -> Interval<U> {
        Interval {
            a: U::from_f64(self.a.to_f64().unwrap()).unwrap(),
            b: U::from_f64(self.b.to_f64().unwrap()).unwrap(),
        }
    }
}

/// Nodes and positive weights of a one-dimensional rule, nodes ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule1D<T> {
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Scalar> Rule1D<T> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: Fn(T) -> T>(&self, f: F) -> T {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    pub fn weight_sum(&self) -> T {
        self.weights.iter().copied().sum()
    }

    /// A degenerate rule: one node with unit weight. Integrating over it
    /// evaluates the integrand at `x`; used for fixed coordinates on box faces.
    pub fn point(x: T) -> Self {
        Self { nodes: vec![x], weights: vec![T::one()] }
    }

    /// Composite midpoint (rectangle) rule with cells no wider than `spacing`.
    pub fn rectangle(interval: Interval<T>, spacing: T) -> Result<Self> {
        if !(spacing > T::zero()) {
            return Err(Error::invalid("rectangle rule spacing must be positive"));
        }
        let ratio = (interval.length() / spacing).to_f64().unwrap();
        // Tolerate lengths that are an integer multiple of the spacing up to rounding.
        let n = ((ratio - 1e-9).ceil() as usize).max(1);
        let h = interval.length() / lit::<T>(n as f64);
        let half = lit::<T>(0.5);
        let nodes = (0..n)
            .map(|i| interval.a + (lit::<T>(i as f64) + half) * h)
            .collect();
        Ok(Self { nodes, weights: vec![h; n] })
    }

    pub fn cast<U: Scalar>(&self) -> Rule1D<U> {
        Rule1D {
            nodes: self.nodes.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
            weights: self.weights.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
        }
    }
}

/// Legendre polynomial `P_n(x)` and its derivative via the three-term recurrence.
fn legendre_with_derivative<T: Scalar>(n: usize, x: T) -> (T, T) {
    let mut p0 = T::one();
    let mut p1 = x;
    for k in 2..=n {
        let kf = lit::<T>(k as f64);
        let p2 = ((lit::<T>(2.0) * kf - T::one()) * x * p1 - (kf - T::one()) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let nf = lit::<T>(n as f64);
    let dp = nf * (x * p1 - p0) / (x * x - T::one());
    (p1, dp)
}

/// The `n`-point Gauss–Legendre rule on `[−1, 1]`.
pub fn gauss_legendre<T: Scalar>(n: usize) -> Result<Rule1D<T>> {
    if n == 0 {
        return Err(Error::invalid("Gauss-Legendre rule needs at least one point"));
    }
    if n == 1 {
        return Ok(Rule1D { nodes: vec![T::zero()], weights: vec![lit(2.0)] });
    }
    let tol = T::epsilon() * lit(4.0);
    let half = n / 2;
    let mut pos_nodes = Vec::with_capacity(half);
    let mut pos_weights = Vec::with_capacity(half);
    // Roots i = 1..half are the largest ones, in descending order.
    for i in 1..=half {
        let guess = (T::PI() * (lit::<T>(i as f64) - lit(0.25)) / (lit::<T>(n as f64) + lit(0.5))).cos();
        let mut x = guess;
        let mut dp = T::one();
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() <= tol {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d.is_finite() {
            dp = d;
        }
        pos_nodes.push(x);
        pos_weights.push(lit::<T>(2.0) / ((T::one() - x * x) * dp * dp));
    }
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..half {
        nodes.push(-pos_nodes[i]);
        weights.push(pos_weights[i]);
    }
    if n % 2 == 1 {
        let (_, dp) = legendre_with_derivative(n, T::zero());
        nodes.push(T::zero());
        weights.push(lit::<T>(2.0) / (dp * dp));
    }
    for i in (0..half).rev() {
        nodes.push(pos_nodes[i]);
        weights.push(pos_weights[i]);
    }
    Ok(Rule1D { nodes, weights })
}

/// Splits `interval` into `n_sub` equal pieces and applies the `n_pts`-point
/// Gauss rule on each.
pub fn composite_grid<T: Scalar>(interval: Interval<T>, n_sub: usize, n_pts: usize) -> Result<Rule1D<T>> {
    if n_sub == 0 {
        return Err(Error::invalid("composite rule needs at least one subinterval"));
    }
    Interval::new(interval.a, interval.b)?;
    let base = gauss_legendre::<T>(n_pts)?;
    let h = interval.length() / lit::<T>(n_sub as f64);
    let half_h = h * lit(0.5);
    let mut nodes = Vec::with_capacity(n_sub * n_pts);
    let mut weights = Vec::with_capacity(n_sub * n_pts);
    for s in 0..n_sub {
        let left = interval.a + h * lit::<T>(s as f64);
        let mid = left + half_h;
        for (&x, &w) in base.nodes.iter().zip(&base.weights) {
            nodes.push(mid + half_h * x);
            weights.push(half_h * w);
        }
    }
    Ok(Rule1D { nodes, weights })
}

/// Per-dimension composite rules for one axis-aligned box.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid<T> {
    pub dims: Vec<Rule1D<T>>,
    pub n_sub: Vec<usize>,
    pub n_pts: Vec<usize>,
}

impl<T: Scalar> QuadratureGrid<T> {
    pub fn new(intervals: &[Interval<T>], n_sub: &[usize], n_pts: &[usize]) -> Result<Self> {
        if intervals.len() != n_sub.len() || intervals.len() != n_pts.len() {
            return Err(Error::shape("one (n_sub, n_pts) pair is needed per dimension"));
        }
        let dims = intervals
            .iter()
            .zip(n_sub.iter().zip(n_pts))
            .map(|(iv, (&s, &p))| composite_grid(*iv, s, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dims, n_sub: n_sub.to_vec(), n_pts: n_pts.to_vec() })
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }
}
