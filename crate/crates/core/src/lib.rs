pub mod cli;
pub mod error;
pub mod eval;
pub mod fft;
pub mod fields;
pub mod fluid;
pub mod score;
pub mod sde;
pub mod spectral;
pub mod training;

pub use error::{Error, Result};
pub use fields::{Field, GridSpec, SnapshotSet};
