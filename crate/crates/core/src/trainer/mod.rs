//! Desk-scale grouped-query-attention transformer used to exercise
//! head-masked fine-tuning end to end.

pub mod ablation;
pub mod data;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod train;

pub use ablation::{ablation_sensitivity, AblationEntry, AblationReport};
pub use data::{make_dataset, Example, TaskFamily, SEQ_LEN, VOCAB};
pub use model::{init_model, Gradients, Layout, ModelConfig, ParamKind, SequenceCache, ToyModel};
pub use optim::{adamw_step, AdamWParams, AdamWState, LrSchedule};
pub use train::{evaluate, train, AttentionFreeze, EvalResult, LogRecord, TrainConfig, TrainOutcome};
