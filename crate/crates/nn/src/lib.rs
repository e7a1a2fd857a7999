//! A small feed-forward convolutional network engine for CPU training.
//!
//! Layers are applied in sequence; a [`LayerSpec::Concat`] layer can pull in the
//! output of any earlier layer, which is enough for U-Net style skips.
//! Parameters and activations are `f32` during training, and the same code runs
//! in `f64` for finite-difference gradient checks.

pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod io;
pub mod layer;
pub mod loss;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{NnError, Result};
pub use exec::{backward, forward, predict, Activations};
pub use gradcheck::{grad_check, grad_check_softmax, GradCheckReport};
pub use io::{load_model, save_model};
pub use layer::{infer_shapes, LayerSpec};
pub use loss::{bce_with_logit, loss_pixel_ce, loss_softmax_ce, LabelMap};
pub use model::{Gradients, Model, ModelMeta, Param};
pub use optim::Sgd;
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{evaluate_loss, fit, fit_with_hook, TrainConfig, TrainHistory, TrainingSet};
