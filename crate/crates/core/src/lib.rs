//! Functional tensor-train neural networks (FTTNN) for high-dimensional PDEs.
//!
//! A solution `u(x₁,…,x_d)` is represented as a chain of matrix-valued
//! univariate networks,
//!
//! ```text
//! u(x) = u₁(x₁) u₂(x₂) ⋯ u_d(x_d),   u_i(x_i) ∈ ℝ^{r_{i−1}×r_i},  r₀ = r_d = 1,
//! ```
//!
//! so every integral appearing in a physics-informed loss factors into a product
//! of one-dimensional Gauss–Legendre sums of Kronecker products. The crate covers
//! the quadrature, the core networks, exact loss assembly and its adjoint, the
//! Adam → L-BFGS training schedule, the built-in benchmark problems and the
//! discrete/Monte-Carlo baselines they are compared against.
//!
//! All numerical kernels are generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` / `*32` aliases below fix the precision. Experiments use `f64`.

pub mod assembly;
pub mod baselines;
pub mod corenet;
pub mod error;
pub mod fttmodel;
pub mod gradients;
pub mod linalg;
pub mod optim;
pub mod problems;
pub mod quadrature;
pub mod rng;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

pub use error::{Error, Result};

/// Floating-point type the numerical kernels are written against.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Width in bytes, used by the checkpoint header.
    const BYTES: usize;
}

impl Scalar for f32 {
    const BYTES: usize = 4;
}

impl Scalar for f64 {
    const BYTES: usize = 8;
}

/// Converts an `f64` literal into `T`.
#[inline(always)]
pub fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("f64 literal representable in scalar type")
}

pub type Interval64 = quadrature::Interval<f64>;
pub type Rule1D64 = quadrature::Rule1D<f64>;
pub type CoreNetwork64 = corenet::CoreNetwork<f64>;
pub type CoreNetwork32 = corenet::CoreNetwork<f32>;
pub type FttModel64 = fttmodel::FttModel<f64>;
pub type FttModel32 = fttmodel::FttModel<f32>;
pub type Functional64 = assembly::Functional<f64>;
pub type ParamVector64 = gradients::ParamVector<f64>;
pub type Adam64 = optim::Adam<f64>;
pub type Lbfgs64 = optim::Lbfgs<f64>;
