//! Desk-scale instance-aware vision-language pre-training.
//!
//! The pipeline: a deterministic shapes-world dataset generator with
//! dual-granularity captions, attention-guided masked feature distillation,
//! global and instance-level contrastive/matching/masked-language objectives
//! with same-source false-negative masking, and retrieval/grounding
//! evaluation harnesses. All numerics are f64 on a minimal reverse-mode
//! autodiff tape so every loss is finite-difference checkable.

pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod masking;
pub mod schema;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Tape, Tensor, Var};
