//! Flat-minima optimization and loss-landscape sharpness for small dense networks.
//!
//! The numerical core is generic over the scalar type through [`Real`]; every
//! experiment in the harness runs on `f64`, and the crate root exports `f64`
//! and `f32` aliases for the main containers.
//!
//! Layout:
//! - [`autodiff`]: parameter vectors, batches, loss / gradient / Hessian-vector
//!   products for ReLU MLPs with softmax cross-entropy, and the [`Objective`]
//!   trait shared by networks and synthetic landscapes.
//! - [`models`]: network construction, prediction, filter-norm balancing and
//!   checkpoints.
//! - [`optimizers`]: momentum SGD, LPF-SGD, SAM and Entropy-SGD steps.
//! - [`sharpness`]: the sharpness measure catalog.
//! - [`landscape`]: quadratic landscapes with controlled spectra and their
//!   closed-form measure values.
//! - [`analysis`]: Kendall rank correlation, normalization, and the
//!   stability-bound calculators.

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod landscape;
pub mod linalg;
pub mod models;
pub mod optimizers;
pub mod rng;
pub mod sharpness;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub use autodiff::{Batch, EvalResult, Examples, MlpObjective, Objective, ParamVector};
pub use error::{Error, Result};
pub use landscape::QuadraticLandscape;
pub use linalg::Matrix;
pub use models::{Activation, Model};
pub use optimizers::OptimizerState;

/// Floating point scalar used by every numerical routine in the crate.
pub trait Real:
    Float
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
    /// Converts an `f64` literal; exact for `f64`, rounded for `f32`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub type ParamVectorF64 = ParamVector<f64>;
pub type ParamVectorF32 = ParamVector<f32>;
pub type BatchF64 = Batch<f64>;
pub type BatchF32 = Batch<f32>;
pub type MatrixF64 = Matrix<f64>;
pub type MatrixF32 = Matrix<f32>;
pub type OptimizerStateF64 = OptimizerState<f64>;
pub type OptimizerStateF32 = OptimizerState<f32>;
pub type QuadraticLandscapeF64 = QuadraticLandscape<f64>;
pub type QuadraticLandscapeF32 = QuadraticLandscape<f32>;
