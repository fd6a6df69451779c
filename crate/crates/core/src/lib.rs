pub mod autodiff;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod registry;
pub mod rng;
pub mod search;
pub mod seed;
pub mod slimnet;
pub mod symnet;

pub use error::{Error, Result};
