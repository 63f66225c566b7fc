//! Data-free model merging toolkit.
//!
//! Merges fine-tuned checkpoints that share a base model by operating on
//! task vectors (per-parameter deltas from the base):
//!
//! - `tensor`: dense matrices, thin SVD, rank selection, seeded RNG
//! - `checkpoint`: bit-exact safetensors-style container + LoRA expansion
//! - `taskvec`: task-vector computation, key partitioning, diagnostics
//! - `merge`: static merging baselines (averaging, task arithmetic, TIES,
//!   DARE, singular-subspace decorrelation, spectrum flattening)
//! - `wudi`: gradient-based merged-vector optimization under interference
//!   losses, with an analytic-gradient/closed-form oracle pair
//! - `theory`: synthetic-task simulator validating the merging-error bound
//! - `pipeline`: recipe dispatch tying the above into one merge driver

pub mod checkpoint;
pub mod merge;
pub mod pipeline;
pub mod taskvec;
pub mod tensor;
pub mod theory;
pub mod wudi;
