//! Group-robust training engine: KL-regularised group DRO over a
//! slice-encoder / aggregator / head classifier, with the baselines,
//! synthetic grouped data, metrics and experiment drivers around it.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod robust;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
