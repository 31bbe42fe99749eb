//! Training loop, checkpoints and evaluation.

mod checkpoint;
mod config;
mod eval;
mod fit;
mod step;

pub use checkpoint::{Checkpoint, CheckpointMeta, CKPT_MAGIC};
pub use config::{
    AugConfig, DataConfig, DataSource, EvalConfig, HeatmapConfig, Method, Protocol, ScheduleConfig, TrainConfig,
};
pub use eval::{evaluate, evaluate_records, mean_responsiveness, predict_heatmaps, EvalReport, MetricsJson};
pub use fit::{fit, fit_with_data, read_diagnostics, read_metrics, EpochDiagnostics, FitOptions, MetricsRow, RunData};
pub use step::{
    Branch, LabeledView, MixBranch, PreparedStep, StepDiagnostics, StepPosition,
    TrainState, Trainer, UnlabeledView,
};
