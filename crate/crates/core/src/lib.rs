//! Dimension-wise function-preserving transforms and progressive
//! importance-aware dropout for small vision transformers.

pub mod checkpoint;
pub mod error;
pub mod importance;
pub mod linalg;
pub mod optim;
pub mod piad;
pub mod real;
pub mod vit;
pub mod wpac;

pub use error::{Error, Result};
pub use real::{DType, Real};
pub use vit::{ArchConfig, Batch, ModuleId, ModuleKind, SubnetMask, Vit};
