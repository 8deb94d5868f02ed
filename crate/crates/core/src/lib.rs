pub mod criteria;
pub mod error;
pub mod gaussian;
pub mod measurement;
pub mod nla;
pub mod qkd;
pub mod quadrature;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
