//! Serialized corpus files: one JSON record per bundle, grouped back into
//! streams on read.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bundler::{bundle_text, EventBundle, Section, SerializedStream};
use crate::ingest::{ClinicalEvent, StayId, Timestamp};

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("line {line}: {reason}")]
    BadLine { line: usize, reason: String },
    #[error("stay {stay}: expected bundle {expected}, found {found}")]
    OutOfOrder { stay: String, expected: usize, found: usize },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub stay_id: StayId,
    pub bundle_index: usize,
    pub window_start: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preceding_gap_hours: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap_token: Option<String>,
    pub text: String,
    pub sections: BTreeMap<Section, Vec<String>>,
    /// Kept so evaluation can derive truth labels without re-ingesting.
    pub events: Vec<ClinicalEvent>,
}

impl CorpusRecord {
    pub fn from_bundle(stay_id: &StayId, bundle: &EventBundle, text: &str) -> Self {
        CorpusRecord {
            stay_id: stay_id.clone(),
            bundle_index: bundle.index,
            window_start: bundle.window_start,
            preceding_gap_hours: bundle.preceding_gap_hours,
            gap_token: bundle.gap_token(),
            text: text.to_string(),
            sections: bundle.sections.clone(),
            events: bundle.events.clone(),
        }
    }

    fn into_bundle(self) -> (EventBundle, String) {
        let bundle = EventBundle {
            index: self.bundle_index,
            window_start: self.window_start,
            events: self.events,
            sections: self.sections,
            preceding_gap_hours: self.preceding_gap_hours,
        };
        (bundle, self.text)
    }
}

pub fn write_corpus_jsonl<W: Write>(streams: &[SerializedStream], mut out: W) -> std::io::Result<()> {
    for s in streams {
        for (b, text) in s.bundles.iter().zip(&s.text_per_bundle) {
            serde_json::to_writer(&mut out, &CorpusRecord::from_bundle(&s.stay_id, b, text))?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn corpus_bytes(streams: &[SerializedStream]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_corpus_jsonl(streams, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

/// Hex sha256 of the canonical JSONL encoding.
pub fn corpus_digest(streams: &[SerializedStream]) -> String {
    hex::encode(Sha256::digest(corpus_bytes(streams)))
}

/// Streams in order of first appearance. Bundles of a stay must be
/// contiguous in index order starting at 0; a missing `text` is recomputed.
pub fn read_corpus_jsonl<R: BufRead>(input: R) -> Result<Vec<SerializedStream>, CorpusError> {
    let mut streams: Vec<SerializedStream> = Vec::new();
    let mut pos: BTreeMap<StayId, usize> = BTreeMap::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| CorpusError::BadLine {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let at = *pos.entry(rec.stay_id.clone()).or_insert_with(|| {
            streams.push(SerializedStream {
                stay_id: rec.stay_id.clone(),
                bundles: Vec::new(),
                text_per_bundle: Vec::new(),
            });
            streams.len() - 1
        });
        let stream = &mut streams[at];
        if rec.bundle_index != stream.bundles.len() {
            return Err(CorpusError::OutOfOrder {
                stay: rec.stay_id.0.clone(),
                expected: stream.bundles.len(),
                found: rec.bundle_index,
            });
        }
        let (bundle, text) = rec.into_bundle();
        let text = if text.is_empty() { bundle_text(&bundle) } else { text };
        stream.bundles.push(bundle);
        stream.text_per_bundle.push(text);
    }
    Ok(streams)
}
