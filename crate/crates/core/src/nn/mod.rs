//! A small differentiable CRNN written against plain `Vec` buffers.
//!
//! Generic over [`Real`](crate::real::Real): `f32` for training, `f64` for
//! finite-difference gradient checks.

mod adam;
mod checkpoint;
mod conv;
mod crnn;
mod gradcheck;
mod gru;
mod head;
mod init;
mod linear;
mod param;
mod transfer;

pub use adam::{lr_schedule, Adam};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use conv::{freq_pool, freq_pool_backward, BatchNorm, ConvBlock, ConvSpec, Shape4, BN_EPS, BN_MOMENTUM};
pub use crnn::{conv_blocks_string, parse_conv_blocks, Crnn, CrnnConfig};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use gru::{BiGru, GruDirection};
pub use head::Head;
pub use linear::LinearProbe;
pub use param::{Param, Tensor, Trainable};
pub use transfer::{replicate_first_layer, transfer_from};
