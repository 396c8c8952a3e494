//! Minimal CPU layer library with hand-written backward passes.
//!
//! Activations are NHWC (`[batch, height, width, channels]`); convolutions
//! run as im2col + GEMM so the hot loops stay inside the matrix multiply.
//! Every layer exposes `forward` returning a per-call cache plus `backward`
//! consuming it, so the same parameters can be run on several batches per
//! step before any update. All code is generic over [`Scalar`] (`f32` for
//! training, `f64` for finite-difference verification).

mod adam;
mod conv;
mod deconv;
mod dense;
mod norm;
pub mod ops;
mod params;

pub use adam::Adam;
pub use conv::{col2im, im2col, ConvCache, WnConv2d};
pub use deconv::{Deconv2d, DeconvCache, WnDeconv2d, WnDeconvCache};
pub use dense::{Dense, DenseCache, WnDense, WnDenseCache};
pub use norm::{BatchNorm, BnCache, BnStats};
pub use ops::{
    dropout_backward, dropout_forward, global_avg_pool, global_avg_pool_backward, leaky_relu,
    leaky_relu_backward, tanh_backward, tanh_forward,
};
pub use params::Parameterized;

/// Scalar element type for all tensors.
pub trait Scalar:
    ndarray::LinalgScalar
    + num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Forward-pass mode: dropout and batch statistics are active in `Train`,
/// frozen in `Eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Guard added under the square root of weight-norm denominators so an
/// all-zero direction vector stays differentiable.
pub(crate) const WN_EPS: f64 = 1e-12;
