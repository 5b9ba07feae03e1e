//! Deformable convolutional LSTM video classification: tensors,
//! reverse-mode autodiff, convolution kernels, the recurrent cell, the full
//! network, the video data pipeline and training.

pub mod autodiff;
pub mod convlstm;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
mod kv;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor};
