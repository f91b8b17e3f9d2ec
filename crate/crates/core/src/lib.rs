pub mod datagen;
pub mod error;
pub mod eval;
pub mod pgm;
pub mod regionsel;
pub mod rng;
pub mod saliency;
pub mod seqpred;
pub mod tensor;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;
