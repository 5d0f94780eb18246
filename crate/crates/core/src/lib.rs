pub mod align;
pub mod cli;
pub mod cycle;
pub mod embed;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
