//! Episodic few-shot classification over frozen image embeddings.
//!
//! A class prototype is produced by a small transformer encoder that reads the
//! class's support embeddings behind a mean "prototype token". Training combines a
//! distance-softmax classification loss with a contrastive loss over leave-one-out
//! sub-prototypes.
//!
//! - [`numerics`]: tensors, reverse-mode differentiation, gradient checking.
//! - [`protomodel`]: the prototype extractor and its parameters.
//! - [`objectives`]: sub-supports, both losses and the per-episode objective.
//! - [`episodes`]: the PFE1 embedding file format and the seeded episode sampler.
//! - [`trainer`]: Adam with gradient accumulation, the epoch loop, checkpoints.
//! - [`evaluator`]: many-episode accuracy with a 95% interval, mode comparison, plot export.

pub mod episodes;
pub mod error;
pub mod evaluator;
pub mod numerics;
pub mod objectives;
pub mod protomodel;
pub mod synthetic;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
