//! Function-vector laboratory on a micro-transformer.

pub mod diffcore;
pub mod cli;
pub mod cltrain;
pub mod error;
pub mod fv;
pub mod eval;
pub mod model;
pub mod rng;
pub mod tasks;

pub use error::{Error, Result};
