//! A vision transformer whose attention heads are stacked: one universal
//! weight set from which the subnetwork of the first `k` heads (and the
//! matching prefix of every other layer) can be run or extracted, trained by
//! sampling one subnetwork per batch.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod optim;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{DataError, Error, Result, TensorError};
pub use tensor::{DType, Float, Tensor};
pub use vit::{ModelConfig, SubnetworkView, UniversalWeights};
