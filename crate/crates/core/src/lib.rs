pub mod aggregation;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod io;
pub mod layers;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
