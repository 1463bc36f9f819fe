//! Tensors, reverse-mode differentiation, AdamW and the warmup-linear schedule.

pub mod gradcheck;
pub mod init;
mod ops;
pub mod optim;
mod scalar;
pub mod schedule;
mod tensor;

pub use ops::multi_head_attention;
pub use optim::{AdamW, AdamWConfig, AdamWState};
pub use scalar::Scalar;

pub use schedule::LrSchedule;
pub use tensor::{no_grad, Tensor};
