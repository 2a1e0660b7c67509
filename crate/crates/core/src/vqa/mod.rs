//! Synthetic visual question answering: data, model and training loop.

mod data;
mod model;
mod train;

pub use data::{
    epoch_batches, generate_dataset, read_dataset, write_dataset, Dataset, DatasetFiles,
    RuleOracle, SyntheticTaskSpec, VqaBatch, PAD_TOKEN,
};
pub use model::{
    build_cst_model, build_model, build_sst_model, build_vanilla_model, ForwardOutput, GateContext,
    ModelConfig, VqaModel,
};
pub use train::{
    evaluate, report_from_predictions, train, ClassAccuracy, EvalReport, MetricsRecord,
    TrainConfig, TrainSummary,
};
