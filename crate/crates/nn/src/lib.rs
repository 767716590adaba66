//! Fully convolutional 1-D time-series classifier with hand-written,
//! exact reverse-mode gradients.
//!
//! Everything is `f64`. Batch work is split into fixed-size blocks before it
//! is handed to worker threads, so outputs do not depend on the thread count.

pub mod error;
mod gemm;
pub mod io;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{NnError, Result};
pub use io::{load_model, model_from_json, model_to_json, save_model};
pub use layers::{batchnorm_forward, conv1d_forward, global_avg_pool, softmax, BatchNorm, BnConfig, Conv1d, Dense, Mode};
pub use loss::{focal_loss, FocalLossConfig, LossOutput};
pub use model::{Architecture, FcnModel, ForwardCache, Gradients, ModelMeta};
pub use optim::{Adam, AdamConfig};
pub use tensor::{Matrix, Tensor3};
