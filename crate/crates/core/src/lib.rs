pub mod autodiff;
pub mod cpmi;
pub mod decoding;
pub mod error;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod purifier;
pub mod reference;
pub mod rng;
pub mod store;
pub mod synthbench;
pub mod tensor;

pub use error::{Error, Result};
