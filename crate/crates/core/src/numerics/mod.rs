//! Tensors, reverse-mode differentiation, Adam, seeded RNG, gradient
//! checking and tensor memory accounting. Everything runs in `f64`.

mod adam;
mod gradcheck;
mod graph;
pub mod memory;
mod param;
mod rng;
pub mod similarity;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport, FD_STEP, REL_ERROR_FLOOR};
pub use graph::{Graph, NodeId};
pub(crate) use graph::softplus;
pub use memory::peak_memory_report;
pub use param::{ParamGroup, ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use similarity::RowSimilarity;
pub use tensor::Tensor;
