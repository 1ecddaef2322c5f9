//! Prequential scoring: step traces, metrics and the leakage-checked runner.

mod judge;
mod metrics;
mod runner;
mod trace;

pub use judge::{clinical_equivalence, parse_judge_score};
pub use metrics::{
    activation_rate, category_of, matched_count, protocol_adherence, recall_at_k, report_table, step_is_adherent, ActionCategory,
    AliasTable, MetricsAccumulator, MetricsReport,
};
pub use runner::{certify, prequential_run, run_trajectory, Access, EvalOptions, EvalOutput, InstrumentedReader, TrajectoryRun};
pub use trace::{read_traces_jsonl, write_traces_jsonl, StepTrace, TRACE_SCHEMA_VERSION};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("global protocol is not frozen")]
    ProtocolNotFrozen,
    #[error("global protocol changed during evaluation ({before} -> {after})")]
    ProtocolMutated { before: String, after: String },
    #[error("truth set is empty")]
    EmptyTruth,
    #[error("bundle {t} of {stay} was read before prediction {prev} was finalized")]
    Leakage { stay: String, t: usize, prev: usize },
    #[error("trace stream: {0}")]
    Trace(String),
}
