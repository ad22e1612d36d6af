pub mod bbm;
pub mod data_io;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod mil_head;
pub mod mtr;
pub mod params;
pub mod refine;

pub use error::{Error, Result};
