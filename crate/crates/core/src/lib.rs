//! Orthogonal finetuning (OFT) adapters and their diagnostics.
//!
//! * [`matcore`]: dense matrices, LU solves, column normalization.
//! * [`adapter`]: Cayley-parameterized block-diagonal rotations and the
//!   OFT / constrained OFT / re-scaled OFT layer adapters, including merging
//!   and convolution kernels.
//! * [`energy`]: hyperspherical energy and preservation reports.
//! * [`grad`]: analytic adapter gradients and a finite-difference oracle.
//! * [`train`]: a small deterministic finetuning harness and experiments.
//! * [`store`]: the binary adapter container.
//!
//! The numeric core is generic over [`Scalar`] (`f32`/`f64`); the harness,
//! store and documented tolerances use `f64`, see the aliases below.

pub mod adapter;
pub mod energy;
pub mod error;
pub mod grad;
pub mod matcore;
pub mod scalar;
pub mod store;
pub mod train;

pub use adapter::{
    cayley, conv_view, materialize, param_count, Adapter, ConvView, Mode, OrthoTransform,
    ParamMethod, SkewParams,
};
pub use energy::{hyperspherical_energy, preservation_report, EnergyReport};
pub use error::{OftError, Result};
pub use matcore::{matmul, normalize_columns, solve, Matrix};
pub use scalar::Scalar;

pub type Mat = Matrix<f64>;
pub type Mat32 = Matrix<f32>;
pub type Adapter64 = Adapter<f64>;
pub type Adapter32 = Adapter<f32>;
pub type Transform64 = OrthoTransform<f64>;
pub type Transform32 = OrthoTransform<f32>;
pub type Mode64 = Mode<f64>;
