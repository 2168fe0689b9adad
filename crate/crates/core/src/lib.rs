pub mod aligner;
pub mod diffcheck;
pub mod error;
pub mod grid;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod signal;
pub mod softdtw;
pub mod toytts;

pub use error::{Error, Result};
pub use grid::Grid;
