pub mod block_cd;
pub mod design;
pub mod error;
pub mod evaluation;
pub mod hierarchy;
pub mod linalg;
pub mod model;
pub mod model_io;
pub mod path;
pub mod splines;

pub use error::{Error, Result};
