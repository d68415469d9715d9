pub mod baseline;
pub mod dynamics;
pub mod eigensolve;
pub mod embedding;
pub mod error;
pub mod io;
pub mod kernel;
pub mod pipeline;
pub mod points;
pub mod rkhs;
pub mod selection;

pub use error::{Error, Result};
