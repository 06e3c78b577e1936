//! SE(3)-equivariant attention for point clouds.
//!
//! The crate is organised around the pipeline of an equivariant network:
//!
//! - [`so3`]: rotations, real Wigner-D matrices, and Clebsch-Gordan blocks —
//!   the representation algebra everything else is built on.
//! - [`sh`]: memoized associated Legendre polynomials and real tesseral
//!   spherical harmonics, the performance-critical angular engine.
//! - [`graph`]: point-cloud to k-nearest-neighbour graph conversion with
//!   relative edge geometry.
//! - [`basis`]: equivariant kernel bases `W_J(x) = unvec(Q_J Y_J(x))` and
//!   learnable radial profiles.
//! - [`autodiff`]: a minimal reverse-mode tape over the array primitives the
//!   layers need, plus an Adam optimizer.
//! - [`fiber`]: degree-indexed, multi-channel feature vectors.
//! - [`layers`]: TFN convolution, SE(3) self-attention, self-interaction,
//!   norm nonlinearity, pooling, and the composed model.
//! - [`nbody`]: the charged-particle regression task, dataset generation,
//!   linear baseline, and equivariance-error metric.
//!
//! All numerics are 64-bit. Basis conventions (m-ordering, phases) are
//! documented once in [`sh`] and shared by every module.

pub mod autodiff;
pub mod basis;
pub mod error;
pub mod fiber;
pub mod graph;
pub mod layers;
pub mod nbody;
pub mod sh;
pub mod so3;

pub use error::{Error, Result};
