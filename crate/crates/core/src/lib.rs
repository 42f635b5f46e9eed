//! Context-aware crack segmentation: an encoder–decoder network with a
//! low-rank linear self-attention bottleneck and attention-gated skip
//! connections, together with the losses, metrics, data pipeline and
//! training machinery around it.
//!
//! Everything runs on the small reverse-mode engine in [`tensor`], in `f64`.

pub mod ablation;
pub mod cagm;
pub mod checkpoint;
pub mod complexity;
pub mod data;
pub mod error;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rfem;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use mask::Mask;
pub use model::{Model, ModelConfig};
pub use tensor::{Tape, Tensor, Var};
