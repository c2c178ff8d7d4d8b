//! Benchmark engine for single-cell perturbation-response prediction.
//!
//! The crate loads perturbational expression datasets, builds train/val/test
//! splits, trains three baseline counterfactual models and scores predictions
//! with fit, rank and collapse-diagnostic metrics. A synthetic generator with
//! exact ground truth backs the test suite.

pub mod aggregate;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod sparse;
pub mod splitter;
pub mod synthgen;

pub use aggregate::{AggregateTable, ConditionAggregate};
pub use dataset::{
    build_control_index, build_counterfactual_requests, load_dataset, sample_matched_controls,
    save_dataset, Condition, ControlIndex, CounterfactualRequest, Covariates, DatasetMeta,
    PerturbationDataset, ValueSpace,
};
pub use error::{Error, Result};
pub use evaluator::{evaluate, MetricConfig, MetricReport};
pub use model::{predict, train_model, ModelConfig, OneHotVocab, TrainState};
pub use sparse::CsrMatrix;
