//! Reverse-mode differentiation over dense `(batch, channel, height, width)`
//! arrays, restricted to the primitives the U-Net and the physics loss use.

mod adam;
pub mod gradcheck;
mod graph;
mod kernels;
mod ssim;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{check_composition, check_primitive, grad_check, project_to_scalar, PRIMITIVES};
pub use graph::{Evaluation, FixedKernel, Graph, NodeId, ParamSpec};
pub use ssim::{ssim_plane, ssim_plane_grad, SsimParams};
pub use tensor::{shape_len, Scalar, Shape, Tensor};
