pub mod design;
pub mod error;
pub mod paths;
pub mod sim;
pub mod spectral;
pub mod stability;

pub use error::{Error, Result};
