pub mod autodiff;
pub mod attention;
pub mod error;
pub mod extractors;
pub mod fat;
pub mod gsa;
pub mod kernels;
pub mod numerics;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod types;

pub use error::{Error, Result};
pub use scalar::Scalar;
