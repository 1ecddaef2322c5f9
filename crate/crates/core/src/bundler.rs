//! Event bundles: greedy one-hour coalescing, silent-gap tokens and the
//! compact sectioned text form fed to the agents.

use std::collections::BTreeMap;

use chrono::Duration;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{ClinicalEvent, EventKind, LabCategory, StayId, Timestamp};

#[derive(Debug, Error, PartialEq)]
pub enum BundleError {
    #[error("events are not sorted by timestamp (index {0})")]
    UnsortedInput(usize),
    #[error("window_hours must be positive")]
    InvalidWindow,
    #[error("corpus is empty")]
    EmptyCorpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Section {
    Diagnoses,
    Medications,
    Labs,
    Procedures,
}

impl Section {
    pub const ORDER: [Section; 4] = [Section::Diagnoses, Section::Medications, Section::Labs, Section::Procedures];

    pub fn of(kind: EventKind) -> Section {
        match kind {
            EventKind::Diagnosis => Section::Diagnoses,
            EventKind::MedicationStart | EventKind::MedicationStop => Section::Medications,
            EventKind::LabResult => Section::Labs,
            EventKind::Procedure => Section::Procedures,
        }
    }

    pub fn heading(self) -> &'static str {
        match self {
            Section::Diagnoses => "[DIAGNOSES]",
            Section::Medications => "[MEDICATIONS]",
            Section::Labs => "[LABS]",
            Section::Procedures => "[PROCEDURES]",
        }
    }
}

/// A named lab panel whose all-normal results collapse into one line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Panel {
    pub name: String,
    pub analytes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BundlerConfig {
    pub window_hours: i64,
    pub gap_threshold_hours: i64,
    pub panels: Vec<Panel>,
}

impl Default for BundlerConfig {
    fn default() -> Self {
        let panel = |name: &str, analytes: &[&str]| Panel {
            name: name.to_string(),
            analytes: analytes.iter().map(|s| s.to_string()).collect(),
        };
        Self {
            window_hours: 1,
            gap_threshold_hours: 6,
            panels: vec![
                panel(
                    "CMP",
                    &[
                        "Sodium",
                        "Potassium",
                        "Chloride",
                        "Bicarbonate",
                        "BUN",
                        "Creatinine",
                        "Glucose",
                        "Calcium",
                        "Total Protein",
                        "Albumin",
                        "Total Bilirubin",
                        "Alkaline Phosphatase",
                        "AST",
                        "ALT",
                    ],
                ),
                panel(
                    "CBC",
                    &["WBC", "RBC", "Hemoglobin", "Hematocrit", "Platelets", "MCV", "MCH", "MCHC", "RDW"],
                ),
            ],
        }
    }
}

impl BundlerConfig {
    /// First configured panel containing `analyte` (case-insensitive).
    fn panel_of(&self, analyte: &str) -> Option<&Panel> {
        self.panels
            .iter()
            .find(|p| p.analytes.iter().any(|a| a.eq_ignore_ascii_case(analyte.trim())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventBundle {
    pub index: usize,
    pub window_start: Timestamp,
    pub events: Vec<ClinicalEvent>,
    pub sections: BTreeMap<Section, Vec<String>>,
    pub preceding_gap_hours: Option<i64>,
}

impl EventBundle {
    pub fn last_timestamp(&self) -> Timestamp {
        self.events.last().map(|e| e.timestamp).unwrap_or(self.window_start)
    }

    /// Ground-truth action labels of this bundle, in event order.
    pub fn action_labels(&self) -> Vec<String> {
        self.events.iter().filter_map(ClinicalEvent::action_label).collect()
    }

    pub fn gap_token(&self) -> Option<String> {
        self.preceding_gap_hours.map(time_delta_token)
    }
}

pub fn time_delta_token(hours: i64) -> String {
    format!("[TIME_DELTA: +{hours} hours]")
}

/// Greedy left-anchored windowing: a bundle opens at the first unassigned
/// event and absorbs every event in `[start, start + window)`.
pub fn build_bundles(events: &[ClinicalEvent], config: &BundlerConfig) -> Result<Vec<EventBundle>, BundleError> {
    if config.window_hours <= 0 {
        return Err(BundleError::InvalidWindow);
    }
    if let Some(i) = events.windows(2).position(|w| w[1].timestamp < w[0].timestamp) {
        return Err(BundleError::UnsortedInput(i + 1));
    }
    let window = Duration::hours(config.window_hours);
    let mut bundles: Vec<EventBundle> = Vec::new();
    for event in events {
        match bundles.last_mut() {
            Some(b) if event.timestamp < b.window_start + window => b.events.push(event.clone()),
            _ => bundles.push(EventBundle {
                index: bundles.len(),
                window_start: event.timestamp,
                events: vec![event.clone()],
                sections: BTreeMap::new(),
                preceding_gap_hours: None,
            }),
        }
    }
    for b in &mut bundles {
        b.sections = build_sections(&b.events, config);
    }
    Ok(bundles)
}

/// Mark bundles preceded by a silence strictly longer than the threshold.
/// The gap runs from the previous bundle's last event to this bundle's start,
/// rounded to the nearest hour.
pub fn annotate_time_deltas(bundles: &mut [EventBundle], gap_threshold_hours: i64) {
    for i in 0..bundles.len() {
        bundles[i].preceding_gap_hours = None;
        if i == 0 {
            continue;
        }
        let secs = (bundles[i].window_start - bundles[i - 1].last_timestamp()).num_seconds();
        let hours = rounded_hours(secs);
        if hours > gap_threshold_hours {
            bundles[i].preceding_gap_hours = Some(hours);
        }
    }
}

fn rounded_hours(secs: i64) -> i64 {
    (secs + 1800).div_euclid(3600)
}

fn build_sections(events: &[ClinicalEvent], config: &BundlerConfig) -> BTreeMap<Section, Vec<String>> {
    // Panels in which every present member is Normal collapse to one line.
    let mut panel_all_normal: BTreeMap<&str, bool> = BTreeMap::new();
    for e in events {
        if let Some(lab) = e.lab_payload() {
            if let Some(panel) = config.panel_of(&lab.analyte) {
                let normal = lab.category == Some(LabCategory::Normal);
                *panel_all_normal.entry(panel.name.as_str()).or_insert(true) &= normal;
            }
        }
    }

    let mut sections: BTreeMap<Section, Vec<String>> = BTreeMap::new();
    let mut seen_lines: std::collections::HashSet<(Section, String)> = std::collections::HashSet::new();
    for e in events {
        let section = Section::of(e.event_kind);
        let line = match e.lab_payload().and_then(|lab| config.panel_of(&lab.analyte)) {
            Some(panel) if panel_all_normal.get(panel.name.as_str()) == Some(&true) => format!("{}: All Normal", panel.name),
            _ => e.rendered.clone(),
        };
        if seen_lines.insert((section, line.clone())) {
            sections.entry(section).or_default().push(line);
        }
    }
    sections
}

/// Sectioned text in fixed section order; absent sections are omitted.
pub fn serialize_bundle(bundle: &EventBundle) -> String {
    let mut out = String::new();
    for section in Section::ORDER {
        if let Some(lines) = bundle.sections.get(&section) {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(section.heading());
            for line in lines {
                out.push('\n');
                out.push_str(line);
            }
        }
    }
    out
}

/// Bundle text with its time-delta token line, if any.
pub fn bundle_text(bundle: &EventBundle) -> String {
    match bundle.gap_token() {
        Some(token) => format!("{token}\n{}", serialize_bundle(bundle)),
        None => serialize_bundle(bundle),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerializedStream {
    pub stay_id: StayId,
    pub bundles: Vec<EventBundle>,
    pub text_per_bundle: Vec<String>,
}

impl SerializedStream {
    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }
}

/// The deterministic events-to-text transformation for one stay.
pub fn serialize_stay(stay_id: StayId, events: &[ClinicalEvent], config: &BundlerConfig) -> Result<SerializedStream, BundleError> {
    let mut bundles = build_bundles(events, config)?;
    annotate_time_deltas(&mut bundles, config.gap_threshold_hours);
    let text_per_bundle = bundles.iter().map(bundle_text).collect();
    Ok(SerializedStream {
        stay_id,
        bundles,
        text_per_bundle,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub stays: usize,
    pub bundles: usize,
    pub events: usize,
    pub events_per_bundle: f64,
    pub bundles_per_stay: f64,
    pub events_per_stay: f64,
    /// Mean events of each kind per bundle.
    pub kind_per_bundle: BTreeMap<EventKind, f64>,
}

pub fn stream_stats(streams: &[SerializedStream]) -> Result<CorpusStats, BundleError> {
    if streams.is_empty() {
        return Err(BundleError::EmptyCorpus);
    }
    let stays = streams.len();
    let bundles: usize = streams.iter().map(|s| s.bundles.len()).sum();
    let mut kinds: BTreeMap<EventKind, usize> = BTreeMap::new();
    let mut events = 0usize;
    for b in streams.iter().flat_map(|s| &s.bundles) {
        events += b.events.len();
        for e in &b.events {
            *kinds.entry(e.event_kind).or_default() += 1;
        }
    }
    let per = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    Ok(CorpusStats {
        stays,
        bundles,
        events,
        events_per_bundle: per(events, bundles),
        bundles_per_stay: per(bundles, stays),
        events_per_stay: per(events, stays),
        kind_per_bundle: kinds.into_iter().map(|(k, n)| (k, per(n, bundles))).collect(),
    })
}
