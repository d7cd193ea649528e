pub mod concepts;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod networks;
pub mod numerics;
pub mod par;
pub mod rewards;
pub mod run;
pub mod trainer;

pub use error::{Error, Result};
