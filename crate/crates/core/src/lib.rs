pub mod datagen;
pub mod cli;
pub mod defense;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod syntax;
pub mod train;

pub use error::{Error, Result};
