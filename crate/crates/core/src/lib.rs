//! Bi-temporal change detection on a small self-contained autodiff substrate.
//!
//! The model compares two co-registered images through a Siamese encoder whose levels are
//! re-weighted by channel-spatial cosine differences, mixes the two pyramids with layer
//! exchange, and decodes a binary change mask.

pub mod ablate;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod csdw;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fpn;
pub mod gradcheck;
pub mod infer;
pub mod led;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod similarity;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use model::{ChangeDetector, Model, ModelConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::{Scalar, Shape, Tensor};
