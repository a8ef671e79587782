//! Fine-tuning runs: configuration, optimizer, metrics, checkpoints and the
//! training loop.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use ablation::{run_ablation, AblationRow};
pub use checkpoint::Checkpoint;
pub use config::{Mode, TrainConfig};
pub use metrics::{ConfusionMatrix, MetricsRecord};
pub use optim::AdamW;
pub use trainer::{evaluate, pretrain, Trainer};
