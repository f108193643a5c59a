//! A conditional VAE that learns image categories one at a time.
//!
//! The decoder's first layer splits into a shared block applied to the latent
//! code and a private block with one column per category. New categories add
//! a column; old ones are rehearsed from the model's own samples.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod ndcore;
pub mod optim;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
pub use model::{CvaeParams, Dims};
pub use ndcore::Tensor2;
