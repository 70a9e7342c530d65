pub mod adapt;
pub mod archive;
pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod experiment;
pub mod lora;
pub mod losses;
pub mod model;
pub mod optim;
pub mod prompts;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
