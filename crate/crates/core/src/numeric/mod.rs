//! Deterministic dense tensors with reverse-mode differentiation.
//!
//! Every computation is recorded on a [`Graph`]; [`Graph::backward`] returns
//! exact gradients of a scalar root, and [`Graph::accumulate`] folds those
//! belonging to named parameters into a [`ParamStore`]. All arithmetic is
//! `f64` and single-threaded, so repeated runs are bit-identical.

mod gradcheck;
mod graph;
pub mod nn;
mod params;
mod tensor;

pub use gradcheck::{
    gradient_check, relative_error, GradCheckConfig, GradCheckReport, ParamCheck, REL_ERROR_FLOOR,
};
pub use graph::{Gradients, Graph, Var};
pub use params::{init_params, Init, ParamEntry, ParamGroup, ParamSpec, ParamStore};
pub use tensor::Tensor;
