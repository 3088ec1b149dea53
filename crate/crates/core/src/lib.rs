//! Numerical laboratory for sharpness dynamics of single-neuron deep linear
//! networks: spectral dataset quantities, exact derivatives, reparameterized
//! optimizers (gradient flow / GD / mini-batch SGD), and the closed-form
//! sharpness bounds and imbalance identities they satisfy.
//!
//! The numeric core is generic over the [`scalar::Scalar`] precision
//! (binary32, binary64, or software double-double); concrete aliases for the
//! common binary64 instantiation live at the crate root.

pub mod dd;
pub mod error;
pub mod linalg;
pub mod rng;
pub mod scalar;

pub mod dataset;
pub mod model;
pub mod optimize;
pub mod quantities;
pub mod reparam;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::{DoubleDouble, Precision, Scalar};

/// Binary64 aliases for the common instantiation.
pub type Mat64 = linalg::DenseMatrix<f64>;
pub type Svd64 = linalg::ThinSvd<f64>;
pub type Dataset64 = dataset::Dataset<f64>;
pub type Spectral64 = dataset::SpectralData<f64>;
pub type Params64 = model::Params<f64>;
pub type State64 = reparam::ReparamState<f64>;

/// Binary32 aliases.
pub type Mat32 = linalg::DenseMatrix<f32>;
pub type Dataset32 = dataset::Dataset<f32>;

/// Extended-precision aliases.
pub type MatDd = linalg::DenseMatrix<DoubleDouble>;
pub type DatasetDd = dataset::Dataset<DoubleDouble>;
