//! Minimal tensor and layer engine for the patch CNN and the sequence LSTM.
//!
//! Every forward op has a matching backward function that takes the upstream
//! gradient and returns input (and parameter) gradients. Storage is generic
//! over [`Scalar`] so the same code trains in `f32` and runs finite-difference
//! checks in `f64`.

pub mod activation;
pub mod checkpoint;
pub mod conv;
pub mod dense;
mod error;
pub mod gradcheck;
pub mod init;
pub mod lstm;
pub mod optim;
pub mod pool;
mod scalar;
mod tensor;

pub use activation::{
    cross_entropy, dropout, dropout_backward, relu, relu_backward, softmax,
    softmax_cross_entropy_backward, DropoutMask, Mode,
};
pub use checkpoint::{Checkpoint, LayerEntry, ModelDescriptor};
pub use conv::{conv2d, conv2d_backward, ConvGrads};
pub use dense::{dense, dense_backward, DenseGrads};
pub use error::{NnError, Result};
pub use gradcheck::{grad_check, Evaluation, GradCheckReport, Probes};
pub use lstm::{lstm_backward, lstm_sequence, LstmGrads, LstmParams, LstmTrace};
pub use optim::Sgd;
pub use pool::{maxpool3, maxpool3_backward, pooled_dim, PoolIndices};
pub use scalar::Scalar;
pub use tensor::Tensor;
