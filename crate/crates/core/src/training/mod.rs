//! Optimizer, schedule, task mixing, curriculum and overfit harness.

pub mod curriculum;
pub mod data;
pub mod harness;
pub mod islr;
pub mod log;
pub mod optim;
pub mod sampler;
pub mod schedule;

pub use curriculum::{load_backbones, run_curriculum, run_finetune, Stage, StageReport, TrainConfig, Trainer};
pub use data::{SltItem, SsaItem, TaskData, Window};
pub use harness::{HarnessConfig, HarnessEval, HarnessReport, OverfitHarness};
pub use islr::{train_islr, IslrConfig, IslrData, IslrModels, IslrReport};
pub use log::{block_means, read_log, LogRecord, TrainLog};
pub use optim::{adamw_step, AdamState, AdamW, AdamWConfig};
pub use sampler::{Batch, MixedSampler};
pub use schedule::one_cycle_lr;
