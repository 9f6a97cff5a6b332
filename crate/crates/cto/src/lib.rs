//! Parallel-beam CT reconstruction toolkit.
//!
//! The crate covers the full pipeline: grid containers and file formats
//! ([`grid`]), analytic ellipse phantoms with closed-form sinograms
//! ([`phantom`]), the discrete Radon transform and its exact-transpose
//! adjoint ([`projector`]), classical FBP/SART baselines ([`classical`]),
//! discrete-continuous convolutions parameterized in function space
//! ([`disco`]), tape-based reverse-mode differentiation ([`autodiff`]), the
//! unrolled neural-operator reconstruction model ([`model`]) and evaluation
//! metrics ([`metrics`]).

pub mod autodiff;
pub mod classical;
pub mod disco;
pub mod error;
pub mod fourier;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod projector;
pub mod tensor;

pub use error::{Error, Result};
pub use grid::{AngleSet, Image, SampleMask, Sinogram};
pub use phantom::PhantomSpec;
pub use projector::ProjectorConfig;
