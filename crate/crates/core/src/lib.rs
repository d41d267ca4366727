pub mod checkpoint;
pub mod codec;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod optim;
pub mod persist;
pub mod preprocess;
pub mod runner;
pub mod synth;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
