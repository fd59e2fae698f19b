//! Vision pair learning: a convolutional and a transformer image classifier
//! trained jointly through a pair learning module (a contrastive objective
//! over embeddings and a KL objective over softened logits) with restricted
//! gradient flow and a three-stage loss schedule.

pub mod backbones;
pub mod data;
pub mod error;
pub mod nn;
pub mod optim;
pub mod plm;
pub mod rng;
pub mod schedule;
pub mod sweep;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
