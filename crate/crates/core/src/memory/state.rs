use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{GlobalProtocol, IndividualProtocol};
use crate::bundler::EventBundle;
use crate::ingest::{MedPhase, Timestamp};

/// Counts prompt units. Budgets are configured in the same unit.
pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> usize;

    /// Longest prefix of `text` holding at most `max` units.
    fn truncate<'a>(&self, text: &'a str, max: usize) -> &'a str;
}

/// Whitespace-delimited words.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn truncate<'a>(&self, text: &'a str, max: usize) -> &'a str {
        if self.count(text) <= max {
            return text;
        }
        if max == 0 {
            return "";
        }
        let mut words = 0;
        let mut in_word = false;
        for (i, c) in text.char_indices() {
            if c.is_whitespace() {
                if in_word {
                    in_word = false;
                    if words == max {
                        return &text[..i];
                    }
                }
            } else if !in_word {
                in_word = true;
                words += 1;
            }
        }
        text
    }
}

/// A medication order carried alongside buffered text so hard state rules
/// can be applied without re-parsing prose.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedOrder {
    pub phase: MedPhase,
    pub drug: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub text: String,
    pub tokens: usize,
    #[serde(default)]
    pub observed_at: Option<Timestamp>,
    #[serde(default)]
    pub med_orders: Vec<MedOrder>,
}

impl BufferEntry {
    pub fn text(text: impl Into<String>, tokens: usize) -> Self {
        BufferEntry {
            text: text.into(),
            tokens,
            observed_at: None,
            med_orders: Vec::new(),
        }
    }

    pub fn from_bundle(bundle: &EventBundle, text: &str, tokens: usize) -> Self {
        BufferEntry {
            text: text.to_string(),
            tokens,
            observed_at: Some(bundle.last_timestamp()),
            med_orders: bundle
                .events
                .iter()
                .filter_map(|e| e.medication_payload())
                .map(|m| MedOrder {
                    phase: m.phase,
                    drug: m.drug.clone(),
                })
                .collect(),
        }
    }
}

/// `(global protocol, individual protocol, raw buffer)` carried across
/// timesteps, plus the Router's short lookback of structured bundles.
#[derive(Debug, Clone)]
pub struct InferenceState {
    pub global: Arc<GlobalProtocol>,
    pub individual: IndividualProtocol,
    buffer: Vec<BufferEntry>,
    buffer_tokens: usize,
    recent: VecDeque<EventBundle>,
}

impl InferenceState {
    pub fn new(global: Arc<GlobalProtocol>) -> Self {
        InferenceState {
            global,
            individual: IndividualProtocol::default(),
            buffer: Vec::new(),
            buffer_tokens: 0,
            recent: VecDeque::new(),
        }
    }

    pub fn buffer(&self) -> &[BufferEntry] {
        &self.buffer
    }

    pub fn buffer_tokens(&self) -> usize {
        self.buffer_tokens
    }

    pub fn buffer_push(&mut self, entry: BufferEntry) {
        self.buffer_tokens += entry.tokens;
        self.buffer.push(entry);
    }

    pub fn push_text(&mut self, text: impl Into<String>, tokens: usize) {
        self.buffer_push(BufferEntry::text(text, tokens));
    }

    /// Empty the buffer, returning its entries.
    pub fn flush_buffer(&mut self) -> Vec<BufferEntry> {
        self.buffer_tokens = 0;
        std::mem::take(&mut self.buffer)
    }

    pub fn recent(&self) -> impl Iterator<Item = &EventBundle> {
        self.recent.iter()
    }

    /// Keep bundles whose last event lies within `lookback_hours` of `bundle`.
    pub fn observe_recent(&mut self, bundle: &EventBundle, lookback_hours: i64) {
        let horizon = bundle.window_start - chrono::Duration::hours(lookback_hours);
        self.recent.retain(|b| b.last_timestamp() >= horizon && b.window_start < bundle.window_start);
        self.recent.push_back(bundle.clone());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn push_counts_tokens() {
        let mut s = InferenceState::new(Arc::new(GlobalProtocol::new()));
        s.push_text("x", 5);
        assert_eq!(s.buffer_tokens(), 5);
        s.push_text("", 0);
        assert_eq!(s.buffer_tokens(), 5);
        assert_eq!(s.buffer().len(), 2);
        let flushed = s.flush_buffer();
        assert_eq!(flushed.len(), 2);
        assert_eq!(s.buffer_tokens(), 0);
    }

    #[test]
    fn whitespace_truncation_keeps_layout() {
        let t = WhitespaceTokenizer;
        assert_eq!(t.truncate("a b\nc  d", 3), "a b\nc");
        assert_eq!(t.truncate("a b", 5), "a b");
        assert_eq!(t.truncate("  a", 0), "");
        assert_eq!(t.count(t.truncate("one two three four", 2)), 2);
    }

    proptest! {
        #[test]
        fn buffer_tokens_equal_sum(pushes in proptest::collection::vec(0usize..500, 0..50)) {
            let mut s = InferenceState::new(Arc::new(GlobalProtocol::new()));
            for (i, n) in pushes.iter().enumerate() {
                s.push_text(format!("entry {i}"), *n);
            }
            let mut oracle = 0usize;
            for n in &pushes {
                oracle += n;
            }
            prop_assert_eq!(s.buffer_tokens(), oracle);
        }

        #[test]
        fn truncate_respects_limit(text in "[a-z \n]{0,80}", max in 0usize..20) {
            let t = WhitespaceTokenizer;
            let cut = t.truncate(&text, max);
            prop_assert!(t.count(cut) <= max);
            prop_assert!(text.starts_with(cut));
            if t.count(&text) <= max {
                prop_assert_eq!(cut, text.as_str());
            }
        }
    }
}
