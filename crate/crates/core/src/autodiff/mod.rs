//! Tape-based reverse-mode autodiff over small dense tensors.
//!
//! Every op is generic over [`Scalar`] so that gradient checks can run the
//! production code path in `f64`.

mod conv;
mod graph;
mod optim;
mod params;
mod tensor;

pub use conv::ConvSpec;
pub use graph::{Gradients, Graph, Var};
pub use optim::AdamW;
pub use params::{
    read_params, read_params_from, write_params, write_params_to, Binding, Params, PARAM_MAGIC,
};
pub use tensor::{Scalar, Tensor};
