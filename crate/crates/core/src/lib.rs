pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod losses;
pub mod maps;
pub mod shading;
pub mod simulator;
pub mod slam;
pub mod splatter;

pub use error::{Error, Result};
