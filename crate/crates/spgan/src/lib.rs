//! spgan: a stylized convolutional generator with projected multi-scale
//! critics, trained adversarially on CPU with a small tape-based autodiff
//! core, plus the distribution metrics (Fréchet distance, kernel distance,
//! k-NN precision/recall) used to score runs. Deterministic under a seed.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod layers;
pub mod optim;
pub mod params;
pub mod util;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
