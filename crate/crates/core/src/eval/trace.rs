use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{ActionCategory, EvalError};
use crate::agents::{AuditVerdict, Prediction};
use crate::ingest::StayId;
use crate::memory::IndividualProtocol;

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// Everything observed at one timestep. Truth fields are filled by the
/// runner only after the prediction is finalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub schema_version: u32,
    pub stay_id: StayId,
    pub t: usize,
    pub bundle_type_truth: Option<ActionCategory>,
    pub truth_actions: Vec<String>,
    pub scored: bool,
    pub recall_at_5: Option<f64>,
    pub prediction: Prediction,
    /// Actions after any Auditor correction; these are scored.
    pub final_actions: Vec<String>,
    pub verdict: AuditVerdict,
    pub activated_rule_ids: Vec<String>,
    pub router_called: bool,
    pub citation_valid: bool,
    pub prompt_tokens: BTreeMap<String, usize>,
    pub state: IndividualProtocol,
    pub state_hash: String,
    pub steward_ran: bool,
    pub incidents: Vec<String>,
    pub equivalence: Option<u8>,
}

impl StepTrace {
    pub fn max_prompt_tokens(&self) -> usize {
        self.prompt_tokens.get("max").copied().unwrap_or(0)
    }
}

pub fn write_traces_jsonl<W: Write>(traces: &[StepTrace], mut out: W) -> std::io::Result<()> {
    for t in traces {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_traces_jsonl<R: BufRead>(input: R) -> Result<Vec<StepTrace>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| EvalError::Trace(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: StepTrace = serde_json::from_str(&line).map_err(|e| EvalError::Trace(format!("line {}: {e}", i + 1)))?;
        if t.schema_version != TRACE_SCHEMA_VERSION {
            return Err(EvalError::Trace(format!("line {}: unsupported schema version {}", i + 1, t.schema_version)));
        }
        out.push(t);
    }
    Ok(out)
}
