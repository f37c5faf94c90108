pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod explain;
pub mod imageops;
pub mod model;
pub mod nn;
pub mod pretrain;
pub mod synthetic;
pub mod tensor_io;

pub use error::{Error, Result};
pub use ndarray;
