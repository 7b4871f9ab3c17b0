pub mod annealing;
pub mod batch;
pub mod data;
pub mod error;
pub mod experts;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod roles;
pub mod routing;
pub mod trainer;

pub use batch::TokenBatch;
pub use error::{Error, Result};
