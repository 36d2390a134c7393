//! Desk-scale laboratory for cross-modal flow matching: a small reverse-mode
//! autodiff engine, flow-matching primitives, cross-modal forcing schedules,
//! a dual-stream speech/sfx audio block, a two-branch audio-video generator,
//! a synthetic coupled-modality world and the metrics used to judge it.

pub mod analysis;
pub mod checkpoint;
pub mod checks;
pub mod dualstream;
pub mod error;
pub mod flowmatch;
pub mod forcing;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rope;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use error::{Error, LabResult, Result, TensorError};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;
