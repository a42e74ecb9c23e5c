pub mod align;
pub mod autodiff;
pub mod cli;
pub mod cache;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod sae;
pub mod theory;

pub use error::{Error, Result};
