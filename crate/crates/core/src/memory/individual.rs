use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::MemoryError;
use crate::ingest::Timestamp;
use crate::text::{dedup_normalized, normalize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub item: String,
    #[serde(default)]
    pub resolved_at: Option<Timestamp>,
}

/// Structured per-patient state evolved by the Steward.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndividualProtocol {
    pub active_problems: Vec<String>,
    pub current_meds: Vec<String>,
    pub procedures: Vec<String>,
    #[serde(alias = "trajectory")]
    pub trends: Vec<String>,
    pub history: Vec<HistoryEntry>,
}

impl IndividualProtocol {
    /// Drop entries that repeat an earlier one after normalization.
    pub fn dedup(&mut self) {
        for list in [&mut self.active_problems, &mut self.current_meds, &mut self.procedures, &mut self.trends] {
            list.retain(|s| !s.trim().is_empty());
            dedup_normalized(list);
        }
        let mut seen = std::collections::HashSet::new();
        self.history.retain(|h| !h.item.trim().is_empty() && seen.insert(normalize(&h.item)));
    }

    pub fn is_deduped(&self) -> bool {
        let mut copy = self.clone();
        copy.dedup();
        &copy == self
    }

    pub fn state_hash(&self) -> String {
        hex::encode(Sha256::digest(serialize_individual(self).as_bytes()))
    }
}

/// Canonical text: fixed key order, list order preserved.
pub fn serialize_individual(individual: &IndividualProtocol) -> String {
    serde_json::to_string_pretty(individual).expect("individual protocol serializes")
}

pub fn parse_individual(text: &str) -> Result<IndividualProtocol, MemoryError> {
    serde_json::from_str(text).map_err(|e| MemoryError::Store(e.to_string()))
}
