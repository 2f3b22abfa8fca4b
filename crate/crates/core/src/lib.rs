pub mod checkpoint;
pub mod error;
pub mod geo3d;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pseudo_label;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
