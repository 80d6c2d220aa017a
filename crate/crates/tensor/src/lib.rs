//! Dense-array autodiff for the rest of the workspace: a single-use tape
//! with reverse-mode gradients, a named parameter store, a layer-adaptive
//! optimizer, and an on-disk array container.
//!
//! The `parallel` feature (on by default) runs the matrix kernels across
//! threads. Both paths accumulate in the same index order, so results are
//! bit-identical with the feature on or off.

pub mod array;
pub mod container;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;

pub use array::DenseArray;
pub use container::{ContainerReader, ContainerWriter, DATA_FILE, MANIFEST_FILE};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{Lamb, LambConfig};
pub use params::ParamStore;
pub use scalar::{Dtype, Scalar};
pub use tape::{Tape, Var, VqGradMode};
