//! Dynamic cardiac MRI reconstruction: cine phantoms, Cartesian k-space
//! undersampling, per-frame dense-CNN restoration, and spatiotemporal
//! Swin-transformer restoration, trained end to end on CPU.

pub mod diffcore;
pub mod dmt4;
pub mod phantom;
pub mod rst;
pub mod sadxnet;
pub mod error;
pub mod kspace;
pub mod loss;
pub mod metrics;
pub mod swin3d;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
