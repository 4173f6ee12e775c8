//! Experiment harness: run configuration, augmentation, the training loop,
//! embedding extraction, ablation grids and report rendering.

pub mod ablate;
pub mod augment;
pub mod config;
pub mod embed;
pub mod report;
pub mod train;

pub use ablate::{run_grid, AblationRow, Grid};
pub use augment::AugPlan;
pub use config::{lr_schedule, AugmentSection, OptimizerSection, RunConfig};
pub use embed::{embed_samples, embed_split_to_archive, EmbedOptions};
pub use report::{rank_report, RankReport, RankReportOptions};
pub use train::{train_from_config, train_on_samples, EpochLog, TrainOutcome};
