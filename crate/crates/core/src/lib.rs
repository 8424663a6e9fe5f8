pub mod coevolution;
pub mod config;
pub mod data;
pub mod discrete;
pub mod engine;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io_util;
pub mod molecule;
pub mod network;
pub mod nn;
pub mod objectives;
pub mod tape;
pub mod tensor;

pub use error::{Error, ErrorFamily, Result};
