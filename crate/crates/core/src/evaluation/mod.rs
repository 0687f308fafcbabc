//! Regression metrics, grouped scoring of prediction runs, ablation runs
//! and table rendering.

pub mod ablation;
pub mod metrics;
pub mod report;
pub mod tables;

pub use ablation::{ablation_grid, run_ablations, AblationConfig, AblationRun, AblationSample};
pub use metrics::{mae, r_squared, rmse, score, MetricsError, MetricsInput, Scores};
pub use report::{evaluate_run, EvalError, MetricsReport, MetricsRow, PredictionRecord, ScaleSet, Space};
pub use tables::{city_model_metrics, task_model_r2, Grid, MetricCell, MetricGrid};
