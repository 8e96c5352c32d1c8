//! Dense 4-D tensors with reverse-mode differentiation for the layer types
//! used by the sensing network and the feature extractor: strided and
//! transposed convolution, ReLU, 2x2 max pooling and elementwise addition.

mod conv;
mod gradcheck;
mod graph;
mod scalar;
mod tensor;

pub use conv::{conv2d, conv2d_transposed, ConvSpec};
pub use gradcheck::{grad_check, grad_check_with_fault, relative_error, GradCheck, RELATIVE_FLOOR};
pub use graph::{Fault, Graph, OpKind, Var};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};
