pub mod error;
pub mod gaussian;
pub mod lgssm;
pub mod sensors;
pub mod filtering;
pub mod smoothing;
pub mod model;
pub mod elbo;
pub mod environments;
pub mod training;
pub mod datastore;

pub use error::{Result, VssfError};
