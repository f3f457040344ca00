pub mod attacks;
pub mod augmentation;
pub mod domains;
pub mod error;
pub mod kernels;
pub mod models;
pub mod nn;
pub mod objective;
pub mod probe;
pub mod protection;
pub mod runner;

pub use error::{Error, Result};
