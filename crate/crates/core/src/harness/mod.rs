//! Configuration, training loops, evaluation and the experiment runners
//! behind the command-line tool.

pub mod config;
pub mod data;
pub mod eval;
pub mod runs;
pub mod train;

pub use config::{DataConfig, FinetuneConfig, Holdout, MergeConfig, MergeStrategy, RunConfig, TrainConfig};
pub use data::{generate_dataset, grammar, prepare, Example};
pub use eval::{evaluate, EvalSummary, Tally};
pub use runs::{
    detach_sweep, eval_report, route_dump, routing_maps, run_ablation, run_eval, run_finetune, run_merge, run_pretrain,
    AblationRow, AblationTable, DetachReport, DetachRow, Prepared, Trained, LAMBDA_SWEEP,
};
pub use train::{train, EpochMetrics, TrainReport};
