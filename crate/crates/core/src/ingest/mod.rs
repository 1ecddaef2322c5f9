//! Typed clinical events and their normalization.
//!
//! Relational rows (diagnoses, medication orders, lab results, procedures) are
//! turned into [`ClinicalEvent`]s carrying a kind-specific payload and a short
//! rendered text line. Continuous lab values are discretized against their
//! reference range; the measured magnitude is always kept in the rendering.

mod tables;

pub use tables::{
    parse_event_jsonl, parse_tables, write_events_jsonl, CodedColumns, LabColumns,
    MedicationColumns, ParseReport, RowError, SchemaMap, TableInput, TableKind,
};

use std::fmt;

use chrono::{DateTime, NaiveDate, NaiveDateTime, TimeZone, Timelike, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute instant, UTC, second resolution.
pub type Timestamp = DateTime<Utc>;

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("non-finite lab value or reference bound")]
    NonFiniteValue,
    #[error("reference range inverted: low {low} > high {high}")]
    InvalidRange { low: f64, high: f64 },
    #[error("{table}: missing column `{column}`")]
    MissingColumn { table: TableKind, column: String },
    #[error("{table} row {row}: {reason}")]
    UnparseableRow {
        table: TableKind,
        row: usize,
        reason: String,
    },
    #[error("event field `{0}` must not be empty")]
    EmptyField(&'static str),
    #[error("payload does not match event kind {0:?}")]
    PayloadMismatch(EventKind),
    #[error("line {line}: {reason}")]
    BadJsonLine { line: usize, reason: String },
}

/// Opaque admission identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StayId(pub String);

impl StayId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for StayId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for StayId {
    fn from(s: &str) -> Self {
        StayId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Diagnosis,
    MedicationStart,
    MedicationStop,
    LabResult,
    Procedure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabCategory {
    Low,
    Normal,
    High,
}

impl fmt::Display for LabCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabCategory::Low => "Low",
            LabCategory::Normal => "Normal",
            LabCategory::High => "High",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabPayload {
    pub analyte: String,
    pub value: f64,
    pub ref_low: Option<f64>,
    pub ref_high: Option<f64>,
    /// `None` when the reference range is missing; rendered as "(No Ref)".
    #[serde(default)]
    pub category: Option<LabCategory>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MedPhase {
    Start,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedicationPayload {
    pub drug: String,
    #[serde(default)]
    pub dose: String,
    #[serde(default)]
    pub route: String,
    pub phase: MedPhase,
}

/// Diagnosis or procedure with a normalized ICD code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodedPayload {
    pub code: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Lab(LabPayload),
    Medication(MedicationPayload),
    Coded(CodedPayload),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalEvent {
    pub event_kind: EventKind,
    pub timestamp: Timestamp,
    pub stay_id: StayId,
    pub payload: Payload,
    #[serde(default)]
    pub rendered: String,
}

/// Map a lab value onto its reference range. Bounds are inclusive-Normal.
pub fn discretize_lab(value: f64, ref_low: f64, ref_high: f64) -> Result<LabCategory, IngestError> {
    if !value.is_finite() || !ref_low.is_finite() || !ref_high.is_finite() {
        return Err(IngestError::NonFiniteValue);
    }
    if ref_low > ref_high {
        return Err(IngestError::InvalidRange {
            low: ref_low,
            high: ref_high,
        });
    }
    Ok(if value < ref_low {
        LabCategory::Low
    } else if value > ref_high {
        LabCategory::High
    } else {
        LabCategory::Normal
    })
}

fn categorize(value: f64, low: Option<f64>, high: Option<f64>) -> Result<Option<LabCategory>, IngestError> {
    if !value.is_finite() {
        return Err(IngestError::NonFiniteValue);
    }
    match (low, high) {
        (Some(lo), Some(hi)) => discretize_lab(value, lo, hi).map(Some),
        _ => Ok(None),
    }
}

/// ICD codes are compared upper-case without dots or surrounding whitespace.
pub fn normalize_icd(code: &str) -> String {
    code.trim().chars().filter(|c| *c != '.' && !c.is_whitespace()).flat_map(char::to_uppercase).collect()
}

impl ClinicalEvent {
    pub fn lab(
        stay_id: StayId,
        timestamp: Timestamp,
        analyte: &str,
        value: f64,
        ref_low: Option<f64>,
        ref_high: Option<f64>,
    ) -> Result<Self, IngestError> {
        let category = categorize(value, ref_low, ref_high)?;
        Self::finish(
            EventKind::LabResult,
            stay_id,
            timestamp,
            Payload::Lab(LabPayload {
                analyte: analyte.trim().to_string(),
                value,
                ref_low,
                ref_high,
                category,
            }),
        )
    }

    pub fn medication(
        stay_id: StayId,
        timestamp: Timestamp,
        drug: &str,
        dose: &str,
        route: &str,
        phase: MedPhase,
    ) -> Result<Self, IngestError> {
        let kind = match phase {
            MedPhase::Start => EventKind::MedicationStart,
            MedPhase::Stop => EventKind::MedicationStop,
        };
        Self::finish(
            kind,
            stay_id,
            timestamp,
            Payload::Medication(MedicationPayload {
                drug: drug.trim().to_string(),
                dose: dose.trim().to_string(),
                route: route.trim().to_string(),
                phase,
            }),
        )
    }

    pub fn diagnosis(stay_id: StayId, timestamp: Timestamp, code: &str, description: &str) -> Result<Self, IngestError> {
        Self::coded(EventKind::Diagnosis, stay_id, timestamp, code, description)
    }

    pub fn procedure(stay_id: StayId, timestamp: Timestamp, code: &str, description: &str) -> Result<Self, IngestError> {
        Self::coded(EventKind::Procedure, stay_id, timestamp, code, description)
    }

    fn coded(
        kind: EventKind,
        stay_id: StayId,
        timestamp: Timestamp,
        code: &str,
        description: &str,
    ) -> Result<Self, IngestError> {
        Self::finish(
            kind,
            stay_id,
            timestamp,
            Payload::Coded(CodedPayload {
                code: normalize_icd(code),
                description: description.trim().to_string(),
            }),
        )
    }

    fn finish(event_kind: EventKind, stay_id: StayId, timestamp: Timestamp, payload: Payload) -> Result<Self, IngestError> {
        let mut event = ClinicalEvent {
            event_kind,
            timestamp: truncate_to_second(timestamp),
            stay_id,
            payload,
            rendered: String::new(),
        };
        event.validate_payload()?;
        event.rendered = render_event(&event);
        Ok(event)
    }

    /// Recompute derived fields (lab category, rendering, timestamp
    /// truncation) for events that arrive pre-typed from outside.
    pub fn normalized(mut self) -> Result<Self, IngestError> {
        if self.stay_id.0.trim().is_empty() {
            return Err(IngestError::EmptyField("stay_id"));
        }
        self.timestamp = truncate_to_second(self.timestamp);
        match &mut self.payload {
            Payload::Lab(lab) => lab.category = categorize(lab.value, lab.ref_low, lab.ref_high)?,
            Payload::Coded(c) => c.code = normalize_icd(&c.code),
            Payload::Medication(_) => {}
        }
        self.validate_payload()?;
        self.rendered = render_event(&self);
        Ok(self)
    }

    fn validate_payload(&self) -> Result<(), IngestError> {
        let ok = match (&self.payload, self.event_kind) {
            (Payload::Lab(lab), EventKind::LabResult) => {
                if lab.analyte.is_empty() {
                    return Err(IngestError::EmptyField("analyte"));
                }
                true
            }
            (Payload::Medication(m), EventKind::MedicationStart) => m.phase == MedPhase::Start,
            (Payload::Medication(m), EventKind::MedicationStop) => m.phase == MedPhase::Stop,
            (Payload::Coded(_), EventKind::Diagnosis | EventKind::Procedure) => true,
            _ => false,
        };
        if !ok {
            return Err(IngestError::PayloadMismatch(self.event_kind));
        }
        match &self.payload {
            Payload::Medication(m) if m.drug.is_empty() => Err(IngestError::EmptyField("drug")),
            Payload::Coded(c) if c.code.is_empty() => Err(IngestError::EmptyField("code")),
            _ => Ok(()),
        }
    }

    /// The ground-truth action label for actionable kinds: medication starts
    /// (rendered line), lab orders (analyte name) and procedures (rendered).
    pub fn action_label(&self) -> Option<String> {
        match (&self.payload, self.event_kind) {
            (Payload::Medication(_), EventKind::MedicationStart) => Some(self.rendered.clone()),
            (Payload::Lab(lab), EventKind::LabResult) => Some(lab.analyte.clone()),
            (Payload::Coded(_), EventKind::Procedure) => Some(self.rendered.clone()),
            _ => None,
        }
    }

    pub fn lab_payload(&self) -> Option<&LabPayload> {
        match &self.payload {
            Payload::Lab(lab) => Some(lab),
            _ => None,
        }
    }

    pub fn medication_payload(&self) -> Option<&MedicationPayload> {
        match &self.payload {
            Payload::Medication(m) => Some(m),
            _ => None,
        }
    }
}

/// Deterministic single-line text for an event.
pub fn render_event(event: &ClinicalEvent) -> String {
    match &event.payload {
        Payload::Lab(lab) => match lab.category {
            Some(cat) => format!("{}: {} ({})", lab.analyte, lab.value, cat),
            None => format!("{}: {} (No Ref)", lab.analyte, lab.value),
        },
        Payload::Medication(m) => match m.phase {
            MedPhase::Start => ["Start", m.drug.as_str(), m.dose.as_str(), m.route.as_str()]
                .iter()
                .filter(|s| !s.is_empty())
                .copied()
                .collect::<Vec<_>>()
                .join(" "),
            MedPhase::Stop => format!("Stop {}", m.drug),
        },
        Payload::Coded(c) => {
            let text = if c.description.is_empty() { &c.code } else { &c.description };
            match event.event_kind {
                EventKind::Diagnosis if !c.description.is_empty() => format!("{} ({})", text, c.code),
                _ => text.to_string(),
            }
        }
    }
    .split_whitespace()
    .collect::<Vec<_>>()
    .join(" ")
}

fn truncate_to_second(ts: Timestamp) -> Timestamp {
    ts.with_nanosecond(0).unwrap_or(ts)
}

/// Parse ISO-8601 (with or without offset; naive values are UTC) or epoch
/// seconds. Sub-second precision is dropped.
pub fn parse_timestamp(raw: &str) -> Option<Timestamp> {
    let s = raw.trim();
    if s.is_empty() {
        return None;
    }
    if let Ok(secs) = s.parse::<f64>() {
        return if secs.is_finite() {
            Utc.timestamp_opt(secs.floor() as i64, 0).single()
        } else {
            None
        };
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(truncate_to_second(dt.with_timezone(&Utc)));
    }
    const NAIVE: [&str; 4] = ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"];
    for fmt in NAIVE {
        if let Ok(n) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(truncate_to_second(n.and_utc()));
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|n| n.and_utc())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ts(s: &str) -> Timestamp {
        parse_timestamp(s).unwrap()
    }

    #[test]
    fn creatinine_high_rendering() {
        assert_eq!(discretize_lab(2.1, 0.6, 1.3), Ok(LabCategory::High));
        let e = ClinicalEvent::lab("s1".into(), ts("2150-01-01T08:00:00Z"), "Creatinine", 2.1, Some(0.6), Some(1.3)).unwrap();
        assert_eq!(e.rendered, "Creatinine: 2.1 (High)");
    }

    #[test]
    fn lactate_and_stop_rendering() {
        let t = ts("2150-01-01T08:00:00Z");
        let lac = ClinicalEvent::lab("s1".into(), t, "Lactate", 4.8, Some(0.5), Some(2.2)).unwrap();
        assert_eq!(render_event(&lac), "Lactate: 4.8 (High)");
        let stop = ClinicalEvent::medication("s1".into(), t, "heparin", "5000 units", "SC", MedPhase::Stop).unwrap();
        assert_eq!(stop.rendered, "Stop heparin");
        assert_eq!(render_event(&stop), render_event(&stop));
        let start = ClinicalEvent::medication("s1".into(), t, "IV fluids", "30 ml/kg", "", MedPhase::Start).unwrap();
        assert_eq!(start.rendered, "Start IV fluids 30 ml/kg");
    }

    #[test]
    fn bounds_are_normal() {
        assert_eq!(discretize_lab(1.0, 1.0, 1.0), Ok(LabCategory::Normal));
        assert_eq!(discretize_lab(0.6, 0.6, 1.3), Ok(LabCategory::Normal));
        assert_eq!(discretize_lab(1.3, 0.6, 1.3), Ok(LabCategory::Normal));
    }

    #[test]
    fn non_finite_rejected() {
        assert_eq!(discretize_lab(f64::NAN, 0.0, 1.0), Err(IngestError::NonFiniteValue));
        assert_eq!(discretize_lab(1.0, f64::NEG_INFINITY, 1.0), Err(IngestError::NonFiniteValue));
        assert!(matches!(discretize_lab(1.0, 2.0, 1.0), Err(IngestError::InvalidRange { .. })));
    }

    #[test]
    fn missing_reference_renders_no_ref() {
        let e = ClinicalEvent::lab("s1".into(), ts("2150-01-01T08:00:00Z"), "Troponin", 0.02, None, Some(0.04)).unwrap();
        assert_eq!(e.lab_payload().unwrap().category, None);
        assert_eq!(e.rendered, "Troponin: 0.02 (No Ref)");
    }

    #[test]
    fn payload_kind_mismatch_is_rejected() {
        let mut e = ClinicalEvent::diagnosis("s1".into(), ts("2150-01-01"), "a41.9", "Sepsis").unwrap();
        assert_eq!(e.rendered, "Sepsis (A419)");
        e.event_kind = EventKind::LabResult;
        assert_eq!(e.normalized(), Err(IngestError::PayloadMismatch(EventKind::LabResult)));
    }

    #[test]
    fn timestamp_forms() {
        let a = ts("2150-01-01T08:00:00.750Z");
        let b = ts("2150-01-01 08:00:00");
        assert_eq!(a, b);
        assert_eq!(ts("0"), Utc.timestamp_opt(0, 0).unwrap());
        assert_eq!(ts("86400.9"), Utc.timestamp_opt(86400, 0).unwrap());
        assert_eq!(ts("2150-01-01T09:00:00+01:00"), b);
        assert!(parse_timestamp("yesterday").is_none());
        assert!(parse_timestamp("").is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn discretization_matches_three_way_comparator(
            v in -1e4f64..1e4, a in -1e4f64..1e4, b in -1e4f64..1e4,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let oracle = if v < lo { LabCategory::Low } else if v > hi { LabCategory::High } else { LabCategory::Normal };
            prop_assert_eq!(discretize_lab(v, lo, hi), Ok(oracle));
        }
    }
}
