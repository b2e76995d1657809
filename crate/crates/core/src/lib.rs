pub mod checkpoint;
pub mod conditioning;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod objectives;
pub mod service;
pub mod params;
pub mod spectral;
pub mod tensor;
pub mod transfer;
pub mod trainer;
pub mod wav;

pub use error::{Error, Result};
