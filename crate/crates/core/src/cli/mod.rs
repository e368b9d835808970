//! Configuration, dataset ingestion, evaluation and the staged selection pipeline.

pub mod config;
pub mod data;
pub mod eval;
pub mod pipeline;

pub use config::{Ini, PipelineConfig};
pub use eval::{bleu, cmd_evaluate, paired_t_test, EvalReport};
pub use pipeline::{cmd_pipeline, PipelineOutcome, STAGES};
