//! The functional tensor-train model `u(x) = u₁(x₁) u₂(x₂) ⋯ u_d(x_d)`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::corenet::{CoreNetwork, InitScheme};
use crate::linalg::vec_mat;
use crate::quadrature::Interval;
use crate::rng::{rng_for, stream};
use crate::{lit, Error, Result, Scalar};

/// Hard cap on tensor-grid evaluation.
pub const MAX_GRID_POINTS: usize = 100_000_000;
/// Hard cap on the sampled tensor built by [`empirical_ftt_rank`].
pub const MAX_SAMPLED_ENTRIES: usize = 10_000_000;

const CHECKPOINT_MAGIC: &[u8; 8] = b"FTTNNCK\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FttModel<T> {
    cores: Vec<CoreNetwork<T>>,
    ranks: Vec<usize>,
}

/// Shape of a model: ranks `(1, r₁, …, r_{d−1}, 1)`, hidden width per core and
/// optional hard-boundary interval per core.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelShape<T> {
    pub ranks: Vec<usize>,
    pub hidden: Vec<usize>,
    pub boundaries: Vec<Option<Interval<T>>>,
}

impl<T: Scalar> ModelShape<T> {
    /// Uniform inner rank `r`, uniform hidden width.
    pub fn uniform(d: usize, rank: usize, hidden: usize, boundaries: Vec<Option<Interval<T>>>) -> Self {
        let mut ranks = vec![rank; d + 1];
        ranks[0] = 1;
        ranks[d] = 1;
        Self { ranks, hidden: vec![hidden; d], boundaries }
    }

    pub fn dim(&self) -> usize {
        self.hidden.len()
    }

    fn validate(&self) -> Result<()> {
        let d = self.hidden.len();
        if d == 0 {
            return Err(Error::invalid("model needs at least one dimension"));
        }
        if self.ranks.len() != d + 1 || self.boundaries.len() != d {
            return Err(Error::shape(format!(
                "{} ranks and {} boundaries for {d} cores",
                self.ranks.len(),
                self.boundaries.len()
            )));
        }
        if self.ranks[0] != 1 || self.ranks[d] != 1 {
            return Err(Error::invalid("ranks: boundary ranks r0 and rd must be 1"));
        }
        if self.ranks.iter().any(|&r| r == 0) {
            return Err(Error::invalid("ranks: every rank must be positive"));
        }
        Ok(())
    }
}

impl<T: Scalar> FttModel<T> {
    pub fn new(shape: &ModelShape<T>, scheme: InitScheme, seed: u64) -> Result<Self> {
        shape.validate()?;
        let cores = (0..shape.dim())
            .map(|i| {
                let mut rng = rng_for(seed, stream::INIT, i as u64);
                CoreNetwork::init(
                    shape.ranks[i],
                    shape.ranks[i + 1],
                    shape.hidden[i],
                    shape.boundaries[i],
                    scheme,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cores, ranks: shape.ranks.clone() })
    }

    pub fn from_cores(cores: Vec<CoreNetwork<T>>) -> Result<Self> {
        if cores.is_empty() {
            return Err(Error::invalid("model needs at least one core"));
        }
        let mut ranks = vec![cores[0].rows()];
        for (i, c) in cores.iter().enumerate() {
            if c.rows() != ranks[i] {
                return Err(Error::shape(format!(
                    "core {i} has {} rows but the previous core has {} columns",
                    c.rows(),
                    ranks[i]
                )));
            }
            ranks.push(c.cols());
        }
        if ranks[0] != 1 || *ranks.last().unwrap() != 1 {
            return Err(Error::invalid("ranks: boundary ranks r0 and rd must be 1"));
        }
        Ok(Self { cores, ranks })
    }

    pub fn shape(&self) -> ModelShape<T> {
        ModelShape {
            ranks: self.ranks.clone(),
            hidden: self.cores.iter().map(|c| c.hidden()).collect(),
            boundaries: self.cores.iter().map(|c| c.boundary()).collect(),
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.cores.len()
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn cores(&self) -> &[CoreNetwork<T>] {
        &self.cores
    }

    pub fn core_mut(&mut self, i: usize) -> &mut CoreNetwork<T> {
        &mut self.cores[i]
    }

    pub fn param_count(&self) -> usize {
        self.cores.iter().map(|c| c.param_count()).sum()
    }

    /// Start offset of each core's parameters in the flat vector, plus the total.
    pub fn param_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.cores.len() + 1);
        let mut acc = 0;
        for c in &self.cores {
            offs.push(acc);
            acc += c.param_count();
        }
        offs.push(acc);
        offs
    }

    pub fn params(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.param_count()];
        let offs = self.param_offsets();
        for (i, c) in self.cores.iter().enumerate() {
            c.write_params(&mut out[offs[i]..offs[i + 1]]);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(format!(
                "model has {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let offs = self.param_offsets();
        for (i, c) in self.cores.iter_mut().enumerate() {
            c.read_params(&flat[offs[i]..offs[i + 1]])?;
        }
        Ok(())
    }

    fn check_point(&self, x: &[T]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!("point has {} coordinates, model has {}", x.len(), self.dim())));
        }
        for (i, (c, &xi)) in self.cores.iter().zip(x).enumerate() {
            if let Some(iv) = c.boundary() {
                if !iv.contains_closed(xi) {
                    return Err(Error::invalid(format!(
                        "x[{i}] = {xi} outside [{}, {}]",
                        iv.a, iv.b
                    )));
                }
            }
        }
        Ok(())
    }

    /// Per-core samples at one point, orders `0..=max_order`.
    fn point_samples(&self, x: &[T], max_order: usize) -> Vec<[Vec<T>; 3]> {
        self.cores
            .iter()
            .zip(x)
            .map(|(c, &xi)| c.eval_nodes(&[xi], max_order).values)
            .collect()
    }

    /// Left-to-right product of the chosen per-core matrices.
    fn chain(&self, pick: impl Fn(usize) -> Vec<T>) -> T {
        let mut v = vec![T::one()];
        let mut tmp = Vec::new();
        for i in 0..self.dim() {
            let (r, c) = (self.ranks[i], self.ranks[i + 1]);
            tmp.resize(c, T::zero());
            vec_mat(&v, &pick(i), r, c, &mut tmp);
            std::mem::swap(&mut v, &mut tmp);
        }
        v[0]
    }

    pub fn forward(&self, x: &[T]) -> Result<T> {
        self.check_point(x)?;
        let s = self.point_samples(x, 0);
        Ok(self.chain(|i| s[i][0].clone()))
    }

    /// `Σ_k u₁⋯u_{k−1} u_k'' u_{k+1}⋯u_d`.
    pub fn laplacian(&self, x: &[T]) -> Result<T> {
        self.check_point(x)?;
        let s = self.point_samples(x, 2);
        Ok((0..self.dim())
            .map(|k| self.chain(|i| if i == k { s[i][2].clone() } else { s[i][0].clone() }))
            .sum())
    }

    /// `∇u(x)`.
    pub fn gradient(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_point(x)?;
        let s = self.point_samples(x, 1);
        Ok((0..self.dim())
            .map(|k| self.chain(|i| if i == k { s[i][1].clone() } else { s[i][0].clone() }))
            .collect())
    }

    /// Values at scattered points; each core is sampled once for all of them.
    pub fn eval_batch(&self, points: &[Vec<T>]) -> Result<Vec<T>> {
        for p in points {
            self.check_point(p)?;
        }
        let d = self.dim();
        let samples: Vec<Vec<T>> = self
            .cores
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let col: Vec<T> = points.iter().map(|p| p[i]).collect();
                c.eval_nodes(&col, 0).values[0].clone()
            })
            .collect();
        let mut out = Vec::with_capacity(points.len());
        let mut v = Vec::new();
        let mut tmp = Vec::new();
        for k in 0..points.len() {
            v.clear();
            v.push(T::one());
            for i in 0..d {
                let (r, c) = (self.ranks[i], self.ranks[i + 1]);
                tmp.resize(c, T::zero());
                vec_mat(&v, &samples[i][k * r * c..(k + 1) * r * c], r, c, &mut tmp);
                std::mem::swap(&mut v, &mut tmp);
            }
            out.push(v[0]);
        }
        Ok(out)
    }

    /// Values on the tensor grid `nodes[0] × ⋯ × nodes[d−1]`, last index fastest.
    pub fn eval_grid(&self, nodes: &[Vec<T>]) -> Result<Vec<T>> {
        if nodes.len() != self.dim() {
            return Err(Error::invalid(format!(
                "{} node vectors for a {}-dimensional model",
                nodes.len(),
                self.dim()
            )));
        }
        let mut total: usize = 1;
        for n in nodes {
            if n.is_empty() {
                return Err(Error::invalid("empty node vector"));
            }
            total = total.saturating_mul(n.len());
        }
        if total > MAX_GRID_POINTS {
            return Err(Error::Resource(format!("grid of {total} points exceeds {MAX_GRID_POINTS}")));
        }
        let mut cur = vec![T::one()];
        let mut prefix = 1usize;
        for (i, core) in self.cores.iter().enumerate() {
            let (r, c) = (self.ranks[i], self.ranks[i + 1]);
            let n = nodes[i].len();
            let vals = core.eval_nodes(&nodes[i], 0).values;
            let m = r * c;
            let mut next = vec![T::zero(); prefix * n * c];
            for p in 0..prefix {
                let v = &cur[p * r..(p + 1) * r];
                for k in 0..n {
                    let out = &mut next[(p * n + k) * c..(p * n + k + 1) * c];
                    vec_mat(v, &vals[0][k * m..(k + 1) * m], r, c, out);
                }
            }
            cur = next;
            prefix *= n;
        }
        Ok(cur)
    }

    /// Serializes to the versioned little-endian checkpoint format.
    ///
    /// ```text
    /// magic  b"FTTNNCK\0"
    /// u32    version (1)
    /// u32    scalar width of the producing model in bytes (4 or 8)
    /// u32    d
    /// u32    ranks[0..=d]
    /// per core: u32 hidden, u8 has_boundary, f64 a, f64 b
    /// u64    parameter count
    /// f64    parameters (w1, b1, W2 row-major, b2 per core, in core order)
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for &r in &self.ranks {
            out.extend_from_slice(&(r as u32).to_le_bytes());
        }
        for c in &self.cores {
            out.extend_from_slice(&(c.hidden() as u32).to_le_bytes());
            let (flag, a, b) = match c.boundary() {
                Some(iv) => (1u8, iv.a.to_f64().unwrap(), iv.b.to_f64().unwrap()),
                None => (0u8, 0.0, 0.0),
            };
            out.push(flag);
            out.extend_from_slice(&a.to_le_bytes());
            out.extend_from_slice(&b.to_le_bytes());
        }
        let params = self.params();
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for p in params {
            out.extend_from_slice(&p.to_f64().unwrap().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { buf: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let _width = r.u32()?;
        let d = r.u32()? as usize;
        if d == 0 || d > 4096 {
            return Err(Error::Checkpoint(format!("implausible dimension {d}")));
        }
        let ranks = (0..=d).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let mut hidden = Vec::with_capacity(d);
        let mut boundaries = Vec::with_capacity(d);
        for _ in 0..d {
            hidden.push(r.u32()? as usize);
            let flag = r.take(1)?[0];
            let a = r.f64()?;
            let b = r.f64()?;
            boundaries.push(if flag == 1 { Some(Interval::new(lit(a), lit(b))?) } else { None });
        }
        let shape = ModelShape { ranks, hidden, boundaries };
        let mut model = Self::new(&shape, InitScheme::Zeros, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let n = r.u64()? as usize;
        if n != model.param_count() {
            return Err(Error::Checkpoint(format!(
                "header implies {} parameters, file stores {n}",
                model.param_count()
            )));
        }
        let params = (0..n).map(|_| r.f64().map(lit::<T>)).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        model.set_params(&params)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Ranks of the unfoldings of the sampled tensor `A[i₁,…,i_d] = u(s₁[i₁],…,s_d[i_d])`,
/// counting singular values above `tol · σ_max`. The result `(1, r₁, …, r_{d−1}, 1)`
/// is a lower bound on the functional TT-rank; the true rank is a supremum over all
/// finite samplings and cannot be computed.
pub fn empirical_ftt_rank<F>(u: F, samples: &[Vec<f64>], tol: f64) -> Result<Vec<usize>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let d = samples.len();
    if d == 0 || samples.iter().any(|s| s.is_empty()) {
        return Err(Error::invalid("every dimension needs at least one sample"));
    }
    let total = samples.iter().try_fold(1usize, |acc, s| acc.checked_mul(s.len()));
    let total = match total {
        Some(t) if t <= MAX_SAMPLED_ENTRIES => t,
        _ => return Err(Error::Resource(format!("sampled tensor exceeds {MAX_SAMPLED_ENTRIES} entries"))),
    };
    let dims: Vec<usize> = samples.iter().map(|s| s.len()).collect();
    let mut entries = Vec::with_capacity(total);
    let mut idx = vec![0usize; d];
    let mut x = vec![0.0; d];
    for _ in 0..total {
        for k in 0..d {
            x[k] = samples[k][idx[k]];
        }
        entries.push(u(&x));
        for k in (0..d).rev() {
            idx[k] += 1;
            if idx[k] < dims[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    let mut ranks = vec![1usize; d + 1];
    let mut rows = 1usize;
    for k in 1..d {
        rows *= dims[k - 1];
        let cols = total / rows;
        let m = DMatrix::from_row_slice(rows, cols, &entries);
        let sv = m.singular_values();
        let smax = sv.iter().cloned().fold(0.0, f64::max);
        ranks[k] = if smax == 0.0 { 0 } else { sv.iter().filter(|&&s| s > tol * smax).count() };
    }
    Ok(ranks)
}
