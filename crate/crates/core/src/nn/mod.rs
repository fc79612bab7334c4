//! A small differentiable-computation kernel. Every forward op has a
//! hand-written backward pass; [`gradcheck`] verifies them numerically.

pub mod adam;
pub mod attention;
pub mod gradcheck;
pub mod matrix;
pub mod ops;
pub mod params;

pub use adam::{adam_step, AdamConfig};
pub use attention::{context_attention_pool, multi_head_attention, ContextPool, MultiHeadAttention};
pub use gradcheck::{check_params, check_values, GradCheckReport, FD_STEP};
pub use matrix::Matrix;
pub use ops::{cross_entropy, linear, sigmoid, softmax, softmax_rows, Linear};
pub use params::ParamSet;
