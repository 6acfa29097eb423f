//! Differentiable thin-lens defocus rendering and depth-from-defocus.
//!
//! The crate renders focused images from an all-in-focus image and a depth
//! map with a spatially-varying Gaussian PSF, differentiates that render with
//! respect to image, circle of confusion and depth, and uses the gradients to
//! recover depth from a focal stack.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! fix the double-precision instantiation used by the CLI and the tests.

pub mod error;
pub mod gradcheck;
pub mod cli;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod optics;
pub mod psf;
pub mod scalar;
pub mod solver;
pub mod synthetic;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Image = imaging::Image<f64>;
pub type ScalarField = imaging::ScalarField<f64>;
pub type DepthMap = imaging::DepthMap<f64>;
pub type CocMap = imaging::CocMap<f64>;
pub type FocalStack = imaging::FocalStack<f64>;
pub type CameraIntrinsics = optics::CameraIntrinsics<f64>;
pub type PsfWorkspace = psf::PsfWorkspace<f64>;
pub type GradientPair = psf::GradientPair<f64>;
