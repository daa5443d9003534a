pub mod attributes;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradsuite;
pub mod hierarchy;
pub mod losses;
pub mod optim;
pub mod prompts;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;
