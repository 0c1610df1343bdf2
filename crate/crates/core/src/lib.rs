//! Deep clustering engine: a small dense-tensor layer library, fully
//! convolutional auto-encoders (FCAE), and discriminatively boosted
//! clustering (DBC) with a Student-t soft k-means head.
//!
//! Module map:
//!
//! - [`tensor`]: `Tensor4`, conv/deconv/pool/unpool/batch-norm/ReLU layers
//!   with forward and backward passes, SGD with momentum, finite-difference
//!   gradient checking and the binary checkpoint format.
//! - [`fcae`]: network specs (MNIST/USPS/COIL presets), the symmetric
//!   auto-encoder model and its end-to-end training loop.
//! - [`dbc`]: soft assignment, boosted targets, KL loss, its analytic
//!   gradients and the joint encoder/center training loop.
//! - [`boostchain`]: the idealized `S -> R = S' -> ...` dynamics in log space.
//! - [`metrics`]: k-means, Hungarian-matched accuracy, NMI, score histograms.
//! - [`data`]: IDX ingestion, the synthetic blob-image generator and
//!   deterministic mini-batching.

pub mod boostchain;
pub mod data;
pub mod dbc;
pub mod error;
pub mod fcae;
pub mod matrix;
pub mod metrics;
pub mod tensor;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use tensor::{Real, Shape4, Tensor4};
