//! Partitioned, level-of-detail Gaussian splatting on the CPU.

pub mod appearance;
pub mod checkpoint;
pub mod error;
pub mod lod;
pub mod losses;
pub mod optim;
pub mod partition;
pub mod sfm;
pub mod splat;
pub mod trainer;

pub use error::{Error, Result};
