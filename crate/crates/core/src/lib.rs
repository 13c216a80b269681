pub mod diffkernel;
mod error;

pub use error::{Error, Result};
pub mod encodings;
pub mod mlpmaps;
pub mod hypernet;
pub mod occupancy;
pub mod renderer;
pub mod model;
pub mod scenekit;
pub mod trainer;
pub mod appsvc;
