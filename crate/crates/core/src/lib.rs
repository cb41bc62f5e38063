//! Kernelized matrix costs for fitting Gaussian mixtures with multiple-output
//! networks.
//!
//! * [`gaussian`]: closed-form Gaussian and mixture inner products, scaled
//!   distance and Gram matrices.
//! * [`costs`]: scalar, vector-matrix, matrix-matrix and SVD costs with
//!   analytic gradients.
//! * [`spectral`]: weighted SVDs of discrete density pairs, the nuclear-norm
//!   bound, identity-map and singular-function pictures.
//! * [`mdn`]: a small multilayer network that maps noise to mixture centers,
//!   trained by ascending one of the costs.
//! * [`patchnet`]: a pixel-patch classifier built from Gaussian units.
//! * [`experiments`]: the canned setups shared by the CLI and the web demo.

pub mod costs;
pub mod error;
pub mod experiments;
pub mod gaussian;
pub mod mdn;
pub mod optim;
pub mod patchnet;
pub mod spectral;

pub use error::{Error, Result};
