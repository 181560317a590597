//! Joint dense retrieval and span reading for entity linking.

pub mod autograd;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod optim;
pub mod params;
pub mod reader;
pub mod retriever;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

pub type Model32 = trainer::Model<f32>;
pub type Model64 = trainer::Model<f64>;
pub type Trainer32<'a> = trainer::Trainer<'a, f32>;
pub type Trainer64<'a> = trainer::Trainer<'a, f64>;
