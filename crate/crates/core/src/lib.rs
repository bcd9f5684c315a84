pub mod bench;
pub mod datagen;
pub mod draft;
pub mod engine;
pub mod error;
pub mod layers;
pub mod lossless;
pub mod mask;
pub mod metrics;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod sampling;
pub mod target;
pub mod trainer;
pub mod tensor;
pub mod verifier;
pub mod weights;

pub use error::{Error, Result};
