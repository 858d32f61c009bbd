//! Sensitivity-driven regularization and pruning for feed-forward networks.
//!
//! Training adds a pull `-lambda * w * max(0, 1 - S)` to every SGD step,
//! where `S` is the output sensitivity of a parameter: the weighted sum of
//! `|dy_k/dw|` over the network outputs. Parameters the output barely feels
//! drift toward zero and are removed by end-of-epoch magnitude thresholding.
//!
//! Module map:
//!
//! - [`tensor`]: dense `f64` tensors and the GEMM kernel.
//! - [`nn`]: layers, forward pass, seeded reverse-mode backward pass, loss.
//! - [`sensitivity`]: per-parameter sensitivity and bounded insensitivity.
//! - [`regularization`]: the sensitivity update rule and l1/l2 baselines.
//! - [`pruning`]: masks, thresholding, sparsity reports, sparse model files.
//! - [`data`]: MNIST IDX loading, synthetic blobs, minibatching.
//! - [`trainer`]: the two-phase train-then-sparsify loop and its artifacts.
//! - [`recipe`]: preset experiments (LeNet300, LeNet5, regularizer comparison).

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod pruning;
pub mod recipe;
pub mod regularization;
pub mod sensitivity;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
