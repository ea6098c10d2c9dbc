pub mod ar;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod kalman;
pub mod linalg;
pub mod model;
pub mod sampler;
pub mod simulate;
pub mod spline;

pub use error::{DglmError, Result};
