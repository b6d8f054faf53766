pub mod error;
pub mod evaluation;
pub mod gradsuite;
pub mod losses;
pub mod network;
pub mod occlusion;
pub mod pipeline;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Shape, Tensor, Var};
