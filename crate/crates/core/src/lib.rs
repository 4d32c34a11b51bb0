//! Detection of synthesized images from local upsampling traces, image
//! gradients and a global embedding, fused and refined in the frequency
//! domain.

pub mod cli;
pub mod error;
pub mod features;
pub mod frequency;
pub mod image_io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod rng;
pub mod semantic;
pub mod tensor;
pub mod toy;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
