//! Reverse-mode automatic differentiation for the forecasting models.
//!
//! Values are 64-bit [`Tensor`]s recorded on a [`Tape`]. Models bind a
//! [`ParamStore`] through a [`Graph`], run a forward pass with the layers in
//! [`nn`], backpropagate a scalar loss and hand the gradients to
//! [`adam_step`].

pub mod error;
mod gemm;
pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use io::{decode_weights, encode_weights, load_weights, save_weights};
pub use nn::{ConvLstmCell, ConvTranspose2x2, Conv2d, Graph, GruCell, Linear, Mlp, ParamGrads};
pub use optim::{adam_step, clip_grad_norm, AdamConfig, StepStats};
pub use params::{ParamStore, META_PREFIX};
pub use tape::{bilinear_resize_planes, Gradients, Tape, Var};
pub use tensor::Tensor;
