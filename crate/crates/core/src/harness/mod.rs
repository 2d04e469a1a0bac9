//! Training, fine-tuning, evaluation and the end-to-end replication pipeline.

pub mod config;
pub mod data;
pub mod metrics;
pub mod optim;
pub mod replicate;
pub mod train;

pub use config::{ColoraConfig, FaigConfig, LossKind, Strategy, TrainConfig};
pub use data::Pair;
pub use metrics::{psnr_metric, Domain};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use train::{evaluate, finetune, pretrain, strategy_tuned_count, EvalReport, FinetuneOutput, Model, TrainLog, Tuned};
pub use replicate::{replicate, ReplicationConfig, ReplicationReport};
