pub mod attention;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
