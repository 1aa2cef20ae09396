//! Config-driven training and evaluation, the ablation matrix, parameter
//! census, memory comparison and result export.

mod ablation;
mod config;
mod export;
mod gradsuite;
mod model;
mod train;

pub use ablation::{
    ablation_matrix, aggregate, expand_cells, layers_label, mean_std, AblationAxes, AblationReport, Aggregate,
    CellKey, GroupKey, SweepConfig,
};
pub use config::{DataSource, HubInput, RunConfig, Variant};
pub use export::{
    export_aggregates, export_layer_sweep, export_results, fmt_g, format_aggregate_table, read_results_json,
    ExportFormat, RUN_COLUMNS,
};
pub use gradsuite::{
    end_to_end_config, end_to_end_suite, gradient_suites, hub_suite, primitive_suite, summarize, CheckResult,
    SuiteSummary, CHECK_MMD_BANDWIDTH,
};
pub use model::{
    expected_census, param_census, DeepPrompts, ForwardInput, GroupCount, Interaction, Model, NaiveInteraction,
    ParamCensus, Prefix,
};
pub use train::{
    evaluate, load_checkpoint, load_data, save_checkpoint, step_memory_comparison, train_on, train_run,
    EpochRecord, Evaluation, RunResult, StepMemory,
};
