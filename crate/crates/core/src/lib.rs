//! RC-Net retinal vessel segmentation on a small dense tensor and
//! reverse-mode autodiff engine.
//!
//! | module | contents |
//! |---|---|
//! | [`tensor`] | rank ≤ 4 row-major tensors, f32 or f64 |
//! | [`autograd`] | define-by-run tape, backward pass, gradient checking |
//! | [`layers`] | conv, batch norm, ReLU, max pool/unpool, softmax, weighted cross-entropy |
//! | [`model`] | the network, parameter counting, checkpoints |
//! | [`data`] | DRIVE/STARE loaders, splits, augmentation, synthetic data |
//! | [`optim`] | SGD, median-frequency weights, training loop |
//! | [`metrics`] | confusion counts, Se/Sp/Acc/F1, AUC, overlays, reports |
//! | [`diagnostics`] | finite-difference checks of every layer and the network |
//! | [`cli`] | run configuration and the `rcnet` subcommands |

pub mod autograd;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod layers;
pub mod map;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use map::BinaryMap;
pub use tensor::{Element, Tensor};
