//! Experiment orchestration: data, configuration, the training loop and
//! result files.

mod config;
mod data;
mod report;
mod train;

pub use config::{default_extra_sparsity, Architecture, Method, TrainConfig};
pub use data::{build_split_tasks, build_synthetic_tasks, load_idx, load_idx_dir, Dataset, TaskData, TaskStream};
pub use report::{
    emit_report, load_report, MetricsSummary, TaskAccuracy, BUFFER_FILE, CHECKPOINT_FILE, CSR_FILE, METRICS_FILE,
    REMOVAL_FILE, REPORT_FILE, STAGES_FILE,
};
pub use train::{
    build_model, run_experiment, EventCounts, Experiment, Quiet, RemovalRow, RunReport, StageRow, TrainObserver,
    TrainView,
};
