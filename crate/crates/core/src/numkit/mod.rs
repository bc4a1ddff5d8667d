//! Dense tensors and the handful of kernels the transformer, losses and
//! probes are built from.

mod gradcheck;
mod ops;
mod tensor;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use ops::{
    gelu, gelu_grad, layer_norm, log_softmax, neg_log_sigmoid, sigmoid, softmax, softmax_jacobian, LAYER_NORM_EPS,
};
pub(crate) use ops::{normalize_backward, normalize_into, softmax_into};
pub use tensor::Tensor;
pub(crate) use tensor::{argmax, dot, matvec_acc, outer_acc, vecmat};
