//! Dual-memory inference state: the frozen global rulebook, the evolving
//! individual protocol and the rolling raw-text buffer.

mod individual;
mod protocol;
mod rules;
mod state;

pub use individual::{parse_individual, serialize_individual, HistoryEntry, IndividualProtocol};
pub use protocol::{match_triggers, GlobalProtocol};
pub use rules::{analyte_matches, has_if_then, parse_trigger, Comparator, GlobalRule, Predicate};
pub use state::{BufferEntry, InferenceState, MedOrder, Tokenizer, WhitespaceTokenizer};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MemoryError {
    #[error("global protocol is frozen")]
    ProtocolFrozen,
    #[error("duplicate rule id {0}")]
    DuplicateRuleId(String),
    #[error("malformed rule: {0}")]
    MalformedRule(String),
    #[error("protocol version hash mismatch (stored {stored}, computed {computed})")]
    HashMismatch { stored: String, computed: String },
    #[error("protocol store: {0}")]
    Store(String),
}
