pub mod attention;
pub mod autodiff;
pub mod checks;
pub mod error;
pub mod fusion;
pub mod reference;
pub mod segregation;
pub mod tensor;
pub mod vqa;

pub use error::{Error, Result};
pub use tensor::{Mask, Tensor};
