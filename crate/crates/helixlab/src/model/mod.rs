//! Toy transformer stack: task definitions, model, training loop,
//! checkpoint and container IO.

pub mod checkpoint;
pub mod config;
pub mod container;
pub mod task;
pub mod train;
pub mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::{MlpKind, ModelConfig};
pub use container::{read_container, write_container, ArrayEntry, Manifest, CONTAINER_VERSION};
pub use task::{TaskSpec, A_POS, B_POS, BOS_POS, EQ_POS, OP_POS, SEQ_LEN};
pub use train::{
    accuracy_on_pairs, evaluate_accuracy, split_pairs, train_task, EvalReport, StepMetrics,
    TrainConfig, TrainOutcome,
};
pub use transformer::{
    mlp_forward, mlp_from_preactivations, Hook, HookSite, MlpWeights, SiteKind, TapedForward,
    ToyTransformer, LN_EPS,
};
