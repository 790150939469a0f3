pub mod beliefnets;
pub mod curriculum;
pub mod error;
pub mod evalharness;
pub mod expconfig;
pub mod nn;
pub mod perception;
pub mod quadsim;
pub mod rewards;
pub mod terrain;
pub mod training;

pub use error::{Error, Result};
