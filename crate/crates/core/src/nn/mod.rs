//! Minimal differentiable layers with hand-written backward passes.
//!
//! Every forward function is pure; backward functions take the forward
//! inputs (or the cached values they need) and the upstream gradient, and
//! return gradients for each differentiable argument. Convolution is
//! cross-correlation: kernels are never flipped.

mod act;
mod checkpoint;
mod conv;
mod deconv;
mod gradcheck;
mod pool;
mod tensor;

pub use act::{relu_backward, relu_forward, sigmoid};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use conv::{conv2d_backward, conv2d_forward, Conv2dGrads, Conv2dSpec};
pub use deconv::{bilinear_kernel, upsample2x_backward, upsample2x_forward, UpsampleGrads};
pub use gradcheck::{
    grad_check, numeric_gradient, relative_error, Differentiable, GradCheckReport, FD_STEP,
};
pub use pool::{maxpool2x2_backward, maxpool2x2_forward, PoolIndices};
pub use tensor::{LayerParam, Tensor};
