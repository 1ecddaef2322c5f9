use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::text::{contains_phrase, normalize};

const DEFAULT_VOCAB: &str = include_str!("../../data/risk_vocab.txt");

/// High-stakes intervention terms that force an audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskVocabulary {
    terms: BTreeSet<String>,
}

impl Default for RiskVocabulary {
    fn default() -> Self {
        Self::parse(DEFAULT_VOCAB)
    }
}

impl RiskVocabulary {
    pub fn empty() -> Self {
        RiskVocabulary { terms: BTreeSet::new() }
    }

    pub fn from_terms<I, S>(terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        RiskVocabulary {
            terms: terms.into_iter().map(|t| normalize(t.as_ref())).filter(|t| !t.is_empty()).collect(),
        }
    }

    /// One term per line; `#` starts a comment.
    pub fn parse(text: &str) -> Self {
        Self::from_terms(text.lines().map(|l| l.split('#').next().unwrap_or("")))
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path).map_err(|e| AgentError::Config(format!("{}: {e}", path.display())))?;
        let vocab = Self::parse(&text);
        if vocab.is_empty() {
            return Err(AgentError::Config(format!("{}: risk vocabulary is empty", path.display())));
        }
        Ok(vocab)
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.terms.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// First term occurring in `action` as a whole-word phrase.
    pub fn hit(&self, action: &str) -> Option<&str> {
        self.terms().find(|t| contains_phrase(action, t))
    }
}
