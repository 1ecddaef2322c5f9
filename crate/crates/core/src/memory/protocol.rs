use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GlobalRule, MemoryError};
use crate::bundler::EventBundle;
use crate::memory::IndividualProtocol;

/// The institutional rulebook: insertion-ordered rules keyed by id.
///
/// Once frozen, every mutation fails with [`MemoryError::ProtocolFrozen`].
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalProtocol {
    rules: IndexMap<String, GlobalRule>,
    frozen: bool,
    version_hash: String,
}

/// On-disk layout, stable field order.
#[derive(Serialize, Deserialize)]
struct ProtocolFile {
    version_hash: String,
    frozen: bool,
    rules: Vec<GlobalRule>,
}

impl Default for GlobalProtocol {
    fn default() -> Self {
        Self::new()
    }
}

impl GlobalProtocol {
    pub fn new() -> Self {
        let mut p = GlobalProtocol {
            rules: IndexMap::new(),
            frozen: false,
            version_hash: String::new(),
        };
        p.version_hash = p.compute_hash();
        p
    }

    pub fn from_rules(rules: impl IntoIterator<Item = GlobalRule>) -> Result<Self, MemoryError> {
        let mut p = Self::new();
        for r in rules {
            p.append_rule(r)?;
        }
        Ok(p)
    }

    fn compute_hash(&self) -> String {
        let rules: Vec<&GlobalRule> = self.rules.values().collect();
        let bytes = serde_json::to_vec(&rules).expect("rules serialize");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn append_rule(&mut self, rule: GlobalRule) -> Result<(), MemoryError> {
        if self.frozen {
            return Err(MemoryError::ProtocolFrozen);
        }
        rule.validate()?;
        if self.rules.contains_key(&rule.rule_id) {
            return Err(MemoryError::DuplicateRuleId(rule.rule_id));
        }
        self.rules.insert(rule.rule_id.clone(), rule);
        self.version_hash = self.compute_hash();
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn version_hash(&self) -> &str {
        &self.version_hash
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn get(&self, rule_id: &str) -> Option<&GlobalRule> {
        self.rules.get(rule_id)
    }

    pub fn rules(&self) -> impl Iterator<Item = &GlobalRule> {
        self.rules.values()
    }

    /// Deterministic trigger prefilter: ids of rules with any firing
    /// predicate, in insertion order.
    pub fn match_triggers(&self, bundle: &EventBundle, individual: &IndividualProtocol) -> Vec<String> {
        self.rules
            .values()
            .filter(|r| r.is_triggered(bundle, individual))
            .map(|r| r.rule_id.clone())
            .collect()
    }

    pub fn to_json(&self) -> String {
        let file = ProtocolFile {
            version_hash: self.version_hash.clone(),
            frozen: self.frozen,
            rules: self.rules.values().cloned().collect(),
        };
        serde_json::to_string_pretty(&file).expect("protocol serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MemoryError> {
        let file: ProtocolFile = serde_json::from_str(text).map_err(|e| MemoryError::Store(e.to_string()))?;
        let mut p = Self::new();
        for rule in file.rules {
            p.append_rule(rule)?;
        }
        if p.version_hash != file.version_hash {
            return Err(MemoryError::HashMismatch {
                stored: file.version_hash,
                computed: p.version_hash,
            });
        }
        p.frozen = file.frozen;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| MemoryError::Store(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let text = std::fs::read_to_string(path).map_err(|e| MemoryError::Store(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Convenience for `GlobalProtocol::match_triggers`.
pub fn match_triggers(bundle: &EventBundle, individual: &IndividualProtocol, protocol: &GlobalProtocol) -> Vec<String> {
    protocol.match_triggers(bundle, individual)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sepsis() -> GlobalRule {
        GlobalRule::new(
            "SEPSIS_V1",
            "SEPSIS",
            "Lactate > 4 OR MAP < 65",
            "fluids + broad-spectrum antibiotics",
            "IF Lactate > 4 OR MAP < 65 THEN fluids + broad-spectrum antibiotics",
        )
        .unwrap()
    }

    #[test]
    fn append_changes_hash() {
        let mut p = GlobalProtocol::new();
        let h0 = p.version_hash().to_string();
        p.append_rule(sepsis()).unwrap();
        assert_eq!(p.len(), 1);
        assert_ne!(p.version_hash(), h0);
    }

    #[test]
    fn frozen_rejects_append() {
        let mut p = GlobalProtocol::new();
        p.freeze();
        assert_eq!(p.append_rule(sepsis()), Err(MemoryError::ProtocolFrozen));
    }

    #[test]
    fn duplicate_id_rejected() {
        let mut p = GlobalProtocol::new();
        p.append_rule(sepsis()).unwrap();
        assert_eq!(p.append_rule(sepsis()), Err(MemoryError::DuplicateRuleId("SEPSIS_V1".into())));
    }

    #[test]
    fn malformed_rule_rejected() {
        let mut p = GlobalProtocol::new();
        let mut r = sepsis();
        r.rule_text = "fluids and antibiotics".into();
        assert!(matches!(p.append_rule(r), Err(MemoryError::MalformedRule(_))));
    }

    #[test]
    fn store_round_trip_and_tamper_detection() {
        let mut p = GlobalProtocol::from_rules([sepsis()]).unwrap();
        p.freeze();
        let text = p.to_json();
        let back = GlobalProtocol::from_json(&text).unwrap();
        assert_eq!(back, p);
        assert!(back.is_frozen());
        let tampered = text.replace("MAP < 65", "MAP < 70");
        assert!(matches!(GlobalProtocol::from_json(&tampered), Err(MemoryError::HashMismatch { .. })));
        // Field order is stable.
        let vh = text.find("version_hash").unwrap();
        let fr = text.find("frozen").unwrap();
        let ru = text.find("rules").unwrap();
        assert!(vh < fr && fr < ru);
    }
}
