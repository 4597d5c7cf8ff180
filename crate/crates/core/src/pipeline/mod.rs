//! Optimization, training loops, checkpoints, decoding and experiments.

pub mod checkpoint;
pub mod experiments;
pub mod gradcheck;
pub mod optim;
pub mod probe;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{check_term, toy_config, toy_setup, LossTerm, TermCheck};
pub use experiments::{sweep_queries, train_and_probe, Ablation, ProbeSettings, RunSummary, SweepRow};
pub use optim::{learning_rate, AdamW};
pub use probe::{knowledge_probe, reconstruction_error, textualization_hit_rate, ProbeReport};
pub use train::{finetune, finetune_step, pretrain, pretrain_step, PairSource, TrainLogRecord, TrainState};
