//! Localize task-sensitive attention heads by comparing base and
//! task-tuned weights, select a head subset, and fine-tune with gradients
//! restricted to that subset.
//!
//! The pipeline:
//!
//! 1. [`store`] reads and writes the `ALPS` checkpoint container.
//! 2. [`geometry`] maps query heads to KV groups and slices per-head
//!    projections out of checkpoint tensors.
//! 3. [`metrics`] and [`scoring`] compute a sensitivity score per head.
//! 4. [`selection`] turns scores into a head mask and a trainable plan.
//! 5. [`trainer`] fine-tunes a small GQA transformer under that plan.

pub mod error;
pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod scoring;
pub mod selection;
pub mod store;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{enumerate_heads, kv_group_of, slice_head_projections, HeadKey, ModelGeometry};
pub use metrics::{Metric, MetricDomain};
pub use scoring::{score_all_heads, ScoreReport};
pub use selection::{
    select_layer_consistent, select_random, select_topk, trainable_plan, HeadMask, Strategy, TrainablePlan,
};
pub use store::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointManifest};
pub use tensor::{DType, Tensor};
