pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod model;
pub mod params;
pub mod retrieval;
pub mod rng;
pub mod router;
pub mod scoring;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::Tensor;
