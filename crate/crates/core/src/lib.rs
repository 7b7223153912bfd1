//! Masked pseudo source separation pre-training on a small scale.

pub mod audio;
pub mod checks;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod labels;
pub mod masking;
pub mod mixture;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod par;
pub mod probes;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use optim::{LrSchedule, ParamStore};
pub use tensor::Tensor;
