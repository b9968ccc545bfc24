pub mod classifier;
pub mod analysis;
pub mod data;
pub mod engine;
pub mod gradcheck;
pub mod io;
pub mod error;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod partition;

pub use error::{Error, Result};
