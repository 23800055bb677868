pub mod aop;
pub mod cli;
pub mod conformal;
pub mod coords;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod solver;

pub use error::{Error, Result};
