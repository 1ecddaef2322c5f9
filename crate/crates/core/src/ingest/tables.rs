use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{parse_timestamp, ClinicalEvent, IngestError, MedPhase, StayId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    Diagnoses,
    Medications,
    Labs,
    Procedures,
}

impl fmt::Display for TableKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TableKind::Diagnoses => "diagnoses",
            TableKind::Medications => "medications",
            TableKind::Labs => "labs",
            TableKind::Procedures => "procedures",
        })
    }
}

/// Column names for diagnosis and procedure tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodedColumns {
    pub stay_id: String,
    pub time: String,
    pub code: String,
    pub description: String,
}

impl Default for CodedColumns {
    fn default() -> Self {
        Self {
            stay_id: "stay_id".into(),
            time: "charttime".into(),
            code: "icd_code".into(),
            description: "description".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MedicationColumns {
    pub stay_id: String,
    pub drug: String,
    pub dose: String,
    pub route: String,
    pub start: String,
    pub stop: String,
}

impl Default for MedicationColumns {
    fn default() -> Self {
        Self {
            stay_id: "stay_id".into(),
            drug: "drug".into(),
            dose: "dose".into(),
            route: "route".into(),
            start: "starttime".into(),
            stop: "stoptime".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabColumns {
    pub stay_id: String,
    pub time: String,
    pub analyte: String,
    pub value: String,
    pub ref_low: String,
    pub ref_high: String,
}

impl Default for LabColumns {
    fn default() -> Self {
        Self {
            stay_id: "stay_id".into(),
            time: "charttime".into(),
            analyte: "label".into(),
            value: "valuenum".into(),
            ref_low: "ref_range_lower".into(),
            ref_high: "ref_range_upper".into(),
        }
    }
}

/// Logical-field to column-name mapping, one block per table kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemaMap {
    pub diagnoses: CodedColumns,
    pub medications: MedicationColumns,
    pub labs: LabColumns,
    pub procedures: CodedColumns,
}

/// One delimited table with a header row.
#[derive(Debug, Clone, Copy)]
pub struct TableInput<'a> {
    pub kind: TableKind,
    pub delimiter: u8,
    pub data: &'a [u8],
}

impl<'a> TableInput<'a> {
    pub fn csv(kind: TableKind, data: &'a [u8]) -> Self {
        Self { kind, delimiter: b',', data }
    }

    pub fn tsv(kind: TableKind, data: &'a [u8]) -> Self {
        Self { kind, delimiter: b'\t', data }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowError {
    pub table: TableKind,
    /// 1-based data row (the header is row 0).
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct ParseReport {
    /// Events per stay, ascending by (timestamp, input order).
    pub events: BTreeMap<StayId, Vec<ClinicalEvent>>,
    /// Rows that were skipped.
    pub row_errors: Vec<RowError>,
    /// Tables that could not be read at all.
    pub table_errors: Vec<IngestError>,
}

impl ParseReport {
    pub fn event_count(&self) -> usize {
        self.events.values().map(Vec::len).sum()
    }
}

struct Header {
    index: BTreeMap<String, usize>,
    table: TableKind,
}

impl Header {
    fn required(&self, column: &str) -> Result<usize, IngestError> {
        self.index.get(column).copied().ok_or_else(|| IngestError::MissingColumn {
            table: self.table,
            column: column.to_string(),
        })
    }

    fn optional(&self, column: &str) -> Option<usize> {
        self.index.get(column).copied()
    }
}

fn field(record: &csv::StringRecord, idx: Option<usize>) -> &str {
    idx.and_then(|i| record.get(i)).map(str::trim).unwrap_or("")
}

fn parse_opt_f64(raw: &str) -> Result<Option<f64>, String> {
    if raw.is_empty() {
        return Ok(None);
    }
    raw.parse::<f64>().map(Some).map_err(|_| format!("not a number: {raw:?}"))
}

/// Parse relational tables into per-stay event lists.
///
/// A missing required column fails that table only; malformed rows are
/// skipped and reported. Medication rows with a stop time yield both a start
/// and a stop event.
pub fn parse_tables(tables: &[TableInput<'_>], schema: &SchemaMap) -> ParseReport {
    let mut report = ParseReport::default();
    let mut collected: Vec<ClinicalEvent> = Vec::new();

    for table in tables {
        if table.data.iter().all(|b| b.is_ascii_whitespace()) {
            continue;
        }
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(table.delimiter)
            .flexible(true)
            .from_reader(table.data);
        let header = match reader.headers() {
            Ok(h) => Header {
                index: h.iter().enumerate().map(|(i, name)| (name.trim().to_string(), i)).collect(),
                table: table.kind,
            },
            Err(e) => {
                report.table_errors.push(IngestError::UnparseableRow {
                    table: table.kind,
                    row: 0,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let parser = match RowParser::new(table.kind, &header, schema) {
            Ok(p) => p,
            Err(e) => {
                report.table_errors.push(e);
                continue;
            }
        };
        for (i, record) in reader.records().enumerate() {
            let row = i + 1;
            let outcome = record
                .map_err(|e| e.to_string())
                .and_then(|r| parser.parse(&r));
            match outcome {
                Ok(events) => collected.extend(events),
                Err(reason) => report.row_errors.push(RowError {
                    table: table.kind,
                    row,
                    reason,
                }),
            }
        }
    }

    // Stable: equal timestamps keep their input order.
    collected.sort_by_key(|e| e.timestamp);
    for event in collected {
        report.events.entry(event.stay_id.clone()).or_default().push(event);
    }
    report
}

enum RowParser {
    Coded {
        kind: TableKind,
        stay: usize,
        time: usize,
        code: usize,
        description: Option<usize>,
    },
    Medication {
        stay: usize,
        drug: usize,
        dose: Option<usize>,
        route: Option<usize>,
        start: usize,
        stop: Option<usize>,
    },
    Lab {
        stay: usize,
        time: usize,
        analyte: usize,
        value: usize,
        low: Option<usize>,
        high: Option<usize>,
    },
}

impl RowParser {
    fn new(kind: TableKind, h: &Header, schema: &SchemaMap) -> Result<Self, IngestError> {
        Ok(match kind {
            TableKind::Diagnoses | TableKind::Procedures => {
                let cols = if kind == TableKind::Diagnoses { &schema.diagnoses } else { &schema.procedures };
                RowParser::Coded {
                    kind,
                    stay: h.required(&cols.stay_id)?,
                    time: h.required(&cols.time)?,
                    code: h.required(&cols.code)?,
                    description: h.optional(&cols.description),
                }
            }
            TableKind::Medications => {
                let cols = &schema.medications;
                RowParser::Medication {
                    stay: h.required(&cols.stay_id)?,
                    drug: h.required(&cols.drug)?,
                    dose: h.optional(&cols.dose),
                    route: h.optional(&cols.route),
                    start: h.required(&cols.start)?,
                    stop: h.optional(&cols.stop),
                }
            }
            TableKind::Labs => {
                let cols = &schema.labs;
                RowParser::Lab {
                    stay: h.required(&cols.stay_id)?,
                    time: h.required(&cols.time)?,
                    analyte: h.required(&cols.analyte)?,
                    value: h.required(&cols.value)?,
                    low: h.optional(&cols.ref_low),
                    high: h.optional(&cols.ref_high),
                }
            }
        })
    }

    fn parse(&self, r: &csv::StringRecord) -> Result<Vec<ClinicalEvent>, String> {
        let stay_of = |idx: usize| -> Result<StayId, String> {
            let s = field(r, Some(idx));
            if s.is_empty() {
                Err("empty stay id".to_string())
            } else {
                Ok(StayId(s.to_string()))
            }
        };
        let time_of = |idx: usize| -> Result<_, String> {
            let raw = field(r, Some(idx));
            parse_timestamp(raw).ok_or_else(|| format!("unparseable timestamp: {raw:?}"))
        };
        let err = |e: IngestError| e.to_string();
        match *self {
            RowParser::Coded {
                kind,
                stay,
                time,
                code,
                description,
            } => {
                let (stay, ts) = (stay_of(stay)?, time_of(time)?);
                let (code, desc) = (field(r, Some(code)), field(r, description));
                let event = if kind == TableKind::Diagnoses {
                    ClinicalEvent::diagnosis(stay, ts, code, desc)
                } else {
                    ClinicalEvent::procedure(stay, ts, code, desc)
                };
                Ok(vec![event.map_err(err)?])
            }
            RowParser::Medication {
                stay,
                drug,
                dose,
                route,
                start,
                stop,
            } => {
                let stay = stay_of(stay)?;
                let (drug, dose, route) = (field(r, Some(drug)), field(r, dose), field(r, route));
                let start_ts = time_of(start)?;
                let mut out = vec![ClinicalEvent::medication(stay.clone(), start_ts, drug, dose, route, MedPhase::Start).map_err(err)?];
                let raw_stop = field(r, stop);
                if !raw_stop.is_empty() {
                    let stop_ts = parse_timestamp(raw_stop).ok_or_else(|| format!("unparseable stop time: {raw_stop:?}"))?;
                    if stop_ts < start_ts {
                        return Err("stop time precedes start time".to_string());
                    }
                    out.push(ClinicalEvent::medication(stay, stop_ts, drug, dose, route, MedPhase::Stop).map_err(err)?);
                }
                Ok(out)
            }
            RowParser::Lab {
                stay,
                time,
                analyte,
                value,
                low,
                high,
            } => {
                let (stay, ts) = (stay_of(stay)?, time_of(time)?);
                let raw_value = field(r, Some(value));
                let value = parse_opt_f64(raw_value)?.ok_or_else(|| "empty lab value".to_string())?;
                let ref_low = parse_opt_f64(field(r, low))?;
                let ref_high = parse_opt_f64(field(r, high))?;
                Ok(vec![ClinicalEvent::lab(stay, ts, field(r, Some(analyte)), value, ref_low, ref_high).map_err(err)?])
            }
        }
    }
}

/// Parse one pre-typed event per line. Derived fields are recomputed; blank
/// lines are ignored. Output is grouped per stay and ordered like
/// [`parse_tables`] output.
pub fn parse_event_jsonl(text: &str) -> Result<BTreeMap<StayId, Vec<ClinicalEvent>>, IngestError> {
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| IngestError::BadJsonLine { line: i + 1, reason };
        let event: ClinicalEvent = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        events.push(event.normalized().map_err(|e| bad(e.to_string()))?);
    }
    events.sort_by_key(|e| e.timestamp);
    let mut out: BTreeMap<StayId, Vec<ClinicalEvent>> = BTreeMap::new();
    for e in events {
        out.entry(e.stay_id.clone()).or_default().push(e);
    }
    Ok(out)
}

pub fn write_events_jsonl<W: Write>(mut w: W, events: &BTreeMap<StayId, Vec<ClinicalEvent>>) -> std::io::Result<()> {
    for event in events.values().flatten() {
        serde_json::to_writer(&mut w, event)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{EventKind, Payload};

    const MEDS: &str = "stay_id,drug,dose,route,starttime,stoptime\n\
        s1,heparin,5000 units,SC,2150-01-01T00:00:00Z,2150-01-03T00:00:00Z\n\
        s1,IV fluids,30 ml/kg,IV,2150-01-01T01:00:00Z,\n";

    #[test]
    fn medication_row_emits_start_and_stop() {
        let report = parse_tables(&[TableInput::csv(TableKind::Medications, MEDS.as_bytes())], &SchemaMap::default());
        let events = &report.events[&StayId::from("s1")];
        let kinds: Vec<_> = events.iter().map(|e| (e.event_kind, e.rendered.as_str())).collect();
        assert_eq!(
            kinds,
            vec![
                (EventKind::MedicationStart, "Start heparin 5000 units SC"),
                (EventKind::MedicationStart, "Start IV fluids 30 ml/kg IV"),
                (EventKind::MedicationStop, "Stop heparin"),
            ]
        );
        assert_eq!((events[2].timestamp - events[0].timestamp).num_hours(), 48);
        assert!(report.row_errors.is_empty());
    }

    #[test]
    fn empty_stream_is_empty() {
        let report = parse_tables(&[TableInput::csv(TableKind::Labs, b"")], &SchemaMap::default());
        assert_eq!(report.event_count(), 0);
        assert!(report.table_errors.is_empty());
        let header_only = "stay_id,charttime,label,valuenum\n";
        let report = parse_tables(&[TableInput::csv(TableKind::Labs, header_only.as_bytes())], &SchemaMap::default());
        assert_eq!(report.event_count(), 0);
    }

    #[test]
    fn missing_column_is_fatal_for_that_table_only() {
        let labs = "stay_id,charttime,valuenum\ns1,2150-01-01,1.0\n";
        let dx = "stay_id,charttime,icd_code,description\ns1,2150-01-01,A41.9,Sepsis\n";
        let report = parse_tables(
            &[TableInput::csv(TableKind::Labs, labs.as_bytes()), TableInput::csv(TableKind::Diagnoses, dx.as_bytes())],
            &SchemaMap::default(),
        );
        assert_eq!(
            report.table_errors,
            vec![IngestError::MissingColumn {
                table: TableKind::Labs,
                column: "label".into()
            }]
        );
        assert_eq!(report.event_count(), 1);
    }

    #[test]
    fn bad_rows_are_skipped_and_counted() {
        let labs = "stay_id\tcharttime\tlabel\tvaluenum\tref_range_lower\tref_range_upper\n\
            s1\t2150-01-01 08:00\tLactate\t4.8\t0.5\t2.2\n\
            s1\tnot-a-time\tLactate\t1.0\t0.5\t2.2\n\
            s1\t2150-01-01 09:00\tLactate\t<0.3\t0.5\t2.2\n\
            s1\t2150-01-01 10:00\tSodium\t140\t\t\n";
        let report = parse_tables(&[TableInput::tsv(TableKind::Labs, labs.as_bytes())], &SchemaMap::default());
        let rows: Vec<_> = report.row_errors.iter().map(|e| e.row).collect();
        assert_eq!(rows, vec![2, 3]);
        let events = &report.events[&StayId::from("s1")];
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].rendered, "Lactate: 4.8 (High)");
        assert_eq!(events[1].rendered, "Sodium: 140 (No Ref)");
    }

    #[test]
    fn equal_timestamps_preserve_input_order() {
        // Oracle: stable sort of the emitted events by timestamp alone.
        let labs = "stay_id,charttime,label,valuenum,ref_range_lower,ref_range_upper\n\
            s1,2150-01-01T08:00:00Z,B,1,0,2\n\
            s1,2150-01-01T07:00:00Z,A,1,0,2\n\
            s1,2150-01-01T08:00:00Z,C,1,0,2\n\
            s1,2150-01-01T08:00:00Z,D,1,0,2\n";
        let report = parse_tables(&[TableInput::csv(TableKind::Labs, labs.as_bytes())], &SchemaMap::default());
        let order: Vec<_> = report.events[&StayId::from("s1")]
            .iter()
            .map(|e| match &e.payload {
                Payload::Lab(l) => l.analyte.clone(),
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(order, vec!["A", "B", "C", "D"]);
    }

    #[test]
    fn custom_schema_map() {
        let schema: SchemaMap = serde_json::from_str(r#"{"labs": {"analyte": "item", "value": "v", "time": "t"}}"#).unwrap();
        let labs = "stay_id,t,item,v\ns9,100,K,4.0\n";
        let report = parse_tables(&[TableInput::csv(TableKind::Labs, labs.as_bytes())], &schema);
        assert_eq!(report.events[&StayId::from("s9")][0].rendered, "K: 4 (No Ref)");
    }

    #[test]
    fn parse_is_idempotent_and_jsonl_round_trips() {
        let a = parse_tables(&[TableInput::csv(TableKind::Medications, MEDS.as_bytes())], &SchemaMap::default());
        let b = parse_tables(&[TableInput::csv(TableKind::Medications, MEDS.as_bytes())], &SchemaMap::default());
        assert_eq!(a.events, b.events);
        let mut buf = Vec::new();
        write_events_jsonl(&mut buf, &a.events).unwrap();
        let back = parse_event_jsonl(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, a.events);
    }

    #[test]
    fn jsonl_bad_line_reports_number() {
        let err = parse_event_jsonl("\n{not json}\n").unwrap_err();
        assert!(matches!(err, IngestError::BadJsonLine { line: 2, .. }));
    }
}
