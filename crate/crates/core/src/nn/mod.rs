//! Minimal feed-forward network engine: 1-D convolution, max pooling, dense,
//! ReLU, flatten, softmax cross-entropy, and Adam.

mod adam;
mod arch;
mod eval;
mod model;
mod net;

pub use adam::{AdamConfig, AdamState};
pub use arch::{ActShape, Architecture, LayerSpec};
pub use eval::{argmax, evaluate, Evaluation};
pub use model::{build_model, ModelParams, ParamTensors, WeightLayout, DENSE_INIT_STD};
pub use net::{forward, loss_and_grads, predict_logits, Prox};

pub(crate) use net::loss_and_grads_samples;
