pub mod data;
pub mod error;
pub mod gradsuite;
pub mod io;
pub mod kv;
pub mod model;
pub mod nn;
pub mod profiles;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
