//! A from-scratch implementation of the ListenNet auditory-attention
//! network for EEG: tensor primitives, layers with hand-written backward
//! passes, the full model, Euclidean-alignment preprocessing, training
//! protocols, finite-difference oracles and the command-line tooling.

pub mod cli;
pub mod error;
pub mod io;
pub mod layers;
pub mod model;
pub mod preprocess;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use model::{ListenNet, ModelConfig};
pub use tensor::{Scalar, Tensor4};
