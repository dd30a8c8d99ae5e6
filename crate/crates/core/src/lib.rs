//! Single-step adversarial training with layer-aware adversarial weight
//! perturbation, and the instruments used to study catastrophic overfitting.

// `!(x >= 0.0)` is how NaN gets rejected alongside negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod autodiff;
pub mod bounds;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod network;
pub mod par;
pub mod perturb;
pub mod repro;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use network::{NetSpec, Network};
pub use tensor::Tensor;
