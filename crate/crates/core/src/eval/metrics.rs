use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use super::{EvalError, StepTrace};
use crate::bundler::EventBundle;
use crate::ingest::EventKind;
use crate::text::normalize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActionCategory {
    Medication,
    LabOrder,
    Procedure,
}

impl ActionCategory {
    pub const ALL: [ActionCategory; 3] = [ActionCategory::Medication, ActionCategory::LabOrder, ActionCategory::Procedure];

    pub fn of(kind: EventKind) -> Option<Self> {
        match kind {
            EventKind::MedicationStart => Some(ActionCategory::Medication),
            EventKind::LabResult => Some(ActionCategory::LabOrder),
            EventKind::Procedure => Some(ActionCategory::Procedure),
            EventKind::Diagnosis | EventKind::MedicationStop => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ActionCategory::Medication => "Medication",
            ActionCategory::LabOrder => "Lab Order",
            ActionCategory::Procedure => "Procedure",
        }
    }
}

/// Majority actionable kind of a truth bundle; ties go to Medication, then
/// LabOrder. `None` when the bundle has no actionable events.
pub fn category_of(bundle: &EventBundle) -> Option<ActionCategory> {
    let mut counts = [0usize; 3];
    for e in &bundle.events {
        if let Some(c) = ActionCategory::of(e.event_kind) {
            counts[c as usize] += 1;
        }
    }
    let best = *counts.iter().max()?;
    if best == 0 {
        return None;
    }
    ActionCategory::ALL.into_iter().find(|c| counts[*c as usize] == best)
}

/// Groups of interchangeable action strings. Overlapping groups merge.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AliasTable {
    canon: BTreeMap<String, String>,
}

impl AliasTable {
    pub fn new<G, S>(groups: G) -> Self
    where
        G: IntoIterator,
        G::Item: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut comps: Vec<BTreeSet<String>> = Vec::new();
        for group in groups {
            let mut merged: BTreeSet<String> = group.into_iter().map(|s| normalize(s.as_ref())).filter(|s| !s.is_empty()).collect();
            comps.retain(|c| {
                if c.is_disjoint(&merged) {
                    true
                } else {
                    merged.extend(c.iter().cloned());
                    false
                }
            });
            comps.push(merged);
        }
        let mut canon = BTreeMap::new();
        for c in comps {
            if let Some(first) = c.iter().next().cloned() {
                for m in c {
                    canon.insert(m, first.clone());
                }
            }
        }
        AliasTable { canon }
    }

    pub fn is_empty(&self) -> bool {
        self.canon.is_empty()
    }

    /// Normalized form, mapped to its group representative.
    pub fn canon(&self, s: &str) -> String {
        let n = normalize(s);
        self.canon.get(&n).cloned().unwrap_or(n)
    }

    pub fn groups(&self) -> Vec<Vec<String>> {
        let mut by_rep: BTreeMap<&String, Vec<String>> = BTreeMap::new();
        for (m, rep) in &self.canon {
            by_rep.entry(rep).or_default().push(m.clone());
        }
        by_rep.into_values().collect()
    }
}

impl Serialize for AliasTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.groups().serialize(s)
    }
}

impl<'de> Deserialize<'de> for AliasTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(AliasTable::new(Vec::<Vec<String>>::deserialize(d)?))
    }
}

/// Size of a maximum one-to-one matching between the first `k` predictions
/// and the truth items.
pub fn matched_count(pred: &[String], truth: &[String], k: usize, aliases: &AliasTable) -> usize {
    let pred: Vec<String> = pred.iter().take(k).map(|p| aliases.canon(p)).collect();
    let truth: Vec<String> = truth.iter().map(|t| aliases.canon(t)).collect();
    let adj: Vec<Vec<usize>> = pred
        .iter()
        .map(|p| truth.iter().enumerate().filter(|(_, t)| *t == p).map(|(j, _)| j).collect())
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; truth.len()];
    fn augment(i: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                if owner[j].is_none_or(|o| augment(o, adj, seen, owner)) {
                    owner[j] = Some(i);
                    return true;
                }
            }
        }
        false
    }
    (0..pred.len())
        .filter(|&i| augment(i, &adj, &mut vec![false; truth.len()], &mut owner))
        .count()
}

pub fn recall_at_k(pred: &[String], truth: &[String], k: usize, aliases: &AliasTable) -> Result<f64, EvalError> {
    if truth.is_empty() {
        return Err(EvalError::EmptyTruth);
    }
    Ok(matched_count(pred, truth, k, aliases) as f64 / truth.len() as f64)
}

/// The step cites an activated rule and all its citations resolve.
pub fn step_is_adherent(trace: &StepTrace) -> bool {
    trace.citation_valid && trace.prediction.cited_rule_ids().any(|id| trace.activated_rule_ids.iter().any(|r| r == id))
}

/// Share of steps with activated rules whose prediction cites one of them.
pub fn protocol_adherence(traces: &[StepTrace]) -> Option<f64> {
    let eligible: Vec<&StepTrace> = traces.iter().filter(|t| !t.activated_rule_ids.is_empty()).collect();
    if eligible.is_empty() {
        return None;
    }
    Some(eligible.iter().filter(|t| step_is_adherent(t)).count() as f64 / eligible.len() as f64)
}

pub fn activation_rate(traces: &[StepTrace]) -> f64 {
    if traces.is_empty() {
        return 0.0;
    }
    traces.iter().filter(|t| t.verdict.triggered).count() as f64 / traces.len() as f64
}

/// Commutative, associative summary of scored traces. Recall is kept as a
/// histogram of `(matched, truth size)` so merging is exact.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsAccumulator {
    recall: BTreeMap<ActionCategory, BTreeMap<(usize, usize), u64>>,
    steps: u64,
    triggered: u64,
    eligible: u64,
    adherent: u64,
    equivalence_sum: u64,
    equivalence_n: u64,
    skipped_empty_truth: u64,
    incidents: u64,
    failed_trajectories: u64,
}

impl MetricsAccumulator {
    pub fn add(&mut self, trace: &StepTrace, aliases: &AliasTable, k: usize) {
        self.steps += 1;
        self.triggered += trace.verdict.triggered as u64;
        if !trace.activated_rule_ids.is_empty() {
            self.eligible += 1;
            self.adherent += step_is_adherent(trace) as u64;
        }
        match (trace.bundle_type_truth, trace.truth_actions.is_empty()) {
            (Some(cat), false) => {
                let m = matched_count(&trace.final_actions, &trace.truth_actions, k, aliases);
                *self.recall.entry(cat).or_default().entry((m, trace.truth_actions.len())).or_default() += 1;
            }
            _ => self.skipped_empty_truth += 1,
        }
        if let Some(score) = trace.equivalence {
            self.equivalence_sum += score as u64;
            self.equivalence_n += 1;
        }
        self.incidents += trace.incidents.len() as u64;
    }

    pub fn add_failed_trajectory(&mut self) {
        self.failed_trajectories += 1;
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        for (cat, hist) in &other.recall {
            let mine = self.recall.entry(*cat).or_default();
            for (key, n) in hist {
                *mine.entry(*key).or_default() += n;
            }
        }
        self.steps += other.steps;
        self.triggered += other.triggered;
        self.eligible += other.eligible;
        self.adherent += other.adherent;
        self.equivalence_sum += other.equivalence_sum;
        self.equivalence_n += other.equivalence_n;
        self.skipped_empty_truth += other.skipped_empty_truth;
        self.incidents += other.incidents;
        self.failed_trajectories += other.failed_trajectories;
    }

    pub fn report(&self) -> MetricsReport {
        let mut recall_at_5 = BTreeMap::new();
        let mut counts = BTreeMap::new();
        for (cat, hist) in &self.recall {
            let n: u64 = hist.values().sum();
            let mut sum = BigRational::zero();
            for ((m, t), c) in hist {
                sum += BigRational::new((*m as u64 * c).into(), (*t as u64).into());
            }
            let mean = sum / BigRational::from_integer(n.into());
            recall_at_5.insert(*cat, mean.to_f64().unwrap_or(f64::NAN));
            counts.insert(*cat, n);
        }
        let ratio = |a: u64, b: u64| (b > 0).then(|| a as f64 / b as f64);
        MetricsReport {
            recall_at_5,
            counts,
            adherence: ratio(self.adherent, self.eligible),
            adherence_eligible: self.eligible,
            activation_rate: ratio(self.triggered, self.steps).unwrap_or(0.0),
            equivalence_mean: ratio(self.equivalence_sum, self.equivalence_n),
            steps: self.steps,
            scored_steps: self.steps - self.skipped_empty_truth,
            skipped_empty_truth: self.skipped_empty_truth,
            incidents: self.incidents,
            failed_trajectories: self.failed_trajectories,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean per-step Recall@5, by the truth bundle's category.
    pub recall_at_5: BTreeMap<ActionCategory, f64>,
    pub counts: BTreeMap<ActionCategory, u64>,
    pub adherence: Option<f64>,
    pub adherence_eligible: u64,
    pub activation_rate: f64,
    pub equivalence_mean: Option<f64>,
    pub steps: u64,
    pub scored_steps: u64,
    /// Steps whose next bundle had no actionable events; not scored.
    pub skipped_empty_truth: u64,
    pub incidents: u64,
    pub failed_trajectories: u64,
}

/// Aligned plain-text rendering of a report.
pub fn report_table(r: &MetricsReport) -> String {
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}%", v * 100.0));
    let mut cols: Vec<(String, String)> = ActionCategory::ALL
        .iter()
        .map(|c| {
            (
                format!("{} R@5", c.label()),
                r.recall_at_5.get(c).map_or("-".to_string(), |v| format!("{v:.4}")),
            )
        })
        .collect();
    cols.push(("Adherence".into(), pct(r.adherence)));
    cols.push(("Activation".into(), pct(Some(r.activation_rate))));
    cols.push(("Equivalence".into(), r.equivalence_mean.map_or("-".to_string(), |v| format!("{v:.2}"))));
    let widths: Vec<usize> = cols.iter().map(|(h, v)| h.len().max(v.len())).collect();
    let mut out = String::new();
    let row = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join(" | ")
    };
    out.push_str(&row(cols.iter().map(|(h, _)| h.as_str()).collect()));
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    out.push('\n');
    out.push_str(&row(cols.iter().map(|(_, v)| v.as_str()).collect()));
    out.push('\n');
    let counts = ActionCategory::ALL
        .iter()
        .map(|c| format!("{}={}", c.label(), r.counts.get(c).copied().unwrap_or(0)))
        .collect::<Vec<_>>()
        .join(", ");
    let _ = writeln!(
        out,
        "steps={} scored={} ({counts}) skipped_empty_truth={} adherence_eligible={} incidents={} failed_trajectories={}",
        r.steps, r.scored_steps, r.skipped_empty_truth, r.adherence_eligible, r.incidents, r.failed_trajectories
    );
    out
}
