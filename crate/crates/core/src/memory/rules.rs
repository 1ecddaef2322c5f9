use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::MemoryError;
use crate::bundler::EventBundle;
use crate::memory::IndividualProtocol;
use crate::text::{contains_phrase, normalize, words};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "present")]
    Present,
}

impl Comparator {
    fn parse(op: &str) -> Option<Self> {
        Some(match op {
            "<" => Comparator::Lt,
            ">" => Comparator::Gt,
            "<=" | "≤" => Comparator::Le,
            ">=" | "≥" => Comparator::Ge,
            "=" | "==" => Comparator::Eq,
            _ => return None,
        })
    }

    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::Lt => value < threshold,
            Comparator::Gt => value > threshold,
            Comparator::Le => value <= threshold,
            Comparator::Ge => value >= threshold,
            Comparator::Eq => value == threshold,
            Comparator::Present => true,
        }
    }
}

/// One atomic comparison from a trigger condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub term: String,
    pub comparator: Comparator,
    pub threshold: Option<f64>,
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.comparator, self.threshold) {
            (Comparator::Present, _) | (_, None) => write!(f, "{} present", self.term),
            (c, Some(t)) => {
                let op = match c {
                    Comparator::Lt => "<",
                    Comparator::Gt => ">",
                    Comparator::Le => "<=",
                    Comparator::Ge => ">=",
                    _ => "=",
                };
                write!(f, "{} {} {}", self.term, op, t)
            }
        }
    }
}

impl Predicate {
    /// Does this predicate fire on the bundle or patient state?
    ///
    /// Numeric comparisons look at lab values in the bundle whose analyte
    /// names the same quantity; term predicates are case-insensitive
    /// substring matches over rendered event lines, active problems and
    /// current meds.
    pub fn matches(&self, bundle: &EventBundle, individual: &IndividualProtocol) -> bool {
        match (self.comparator, self.threshold) {
            (Comparator::Present, _) | (_, None) => {
                let needle = normalize(&self.term);
                if needle.is_empty() {
                    return false;
                }
                bundle
                    .events
                    .iter()
                    .map(|e| e.rendered.as_str())
                    .chain(individual.active_problems.iter().map(String::as_str))
                    .chain(individual.current_meds.iter().map(String::as_str))
                    .any(|line| normalize(line).contains(&needle))
            }
            (cmp, Some(threshold)) => bundle
                .events
                .iter()
                .filter_map(|e| e.lab_payload())
                .any(|lab| analyte_matches(&self.term, &lab.analyte) && cmp.holds(lab.value, threshold)),
        }
    }
}

/// "Blood Glucose" names the same quantity as "Glucose".
pub fn analyte_matches(term: &str, analyte: &str) -> bool {
    let (t, a) = (normalize(term), normalize(analyte));
    !t.is_empty() && !a.is_empty() && (t == a || contains_phrase(&t, &a) || contains_phrase(&a, &t))
}

fn split_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\s+(?:or|and)\s+|,|;").unwrap())
}

fn atom_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?P<term>.*?\S)\s*(?P<op><=|>=|==|≤|≥|=|<|>)\s*(?P<num>-?\d+(?:\.\d+)?)\b.*$").unwrap())
}

/// Parse a free-text trigger into atomic predicates.
///
/// `OR`/`AND`/commas separate atoms; `[TRIGGER: ...]` wrappers are peeled.
/// Atoms without a recognizable comparison become term predicates, so a
/// condition that cannot be parsed at all degrades to a single term match on
/// the whole string.
pub fn parse_trigger(condition: &str) -> Vec<Predicate> {
    let mut body = condition.trim();
    if let Some(rest) = body.strip_prefix('[') {
        body = rest.strip_suffix(']').unwrap_or(rest).trim();
        if body.len() >= 8 && body[..8].eq_ignore_ascii_case("trigger:") {
            body = body[8..].trim();
        }
    }
    let mut out = Vec::new();
    for atom in split_regex().split(body) {
        let atom = atom.trim().trim_matches(|c| c == '(' || c == ')' || c == '"').trim();
        if atom.is_empty() {
            continue;
        }
        let pred = match atom_regex().captures(atom) {
            Some(caps) => {
                let comparator = Comparator::parse(&caps["op"]);
                let threshold = caps["num"].parse::<f64>().ok();
                match (comparator, threshold) {
                    (Some(comparator), Some(t)) => Predicate {
                        term: caps["term"].trim().to_string(),
                        comparator,
                        threshold: Some(t),
                    },
                    _ => term_predicate(atom),
                }
            }
            None => term_predicate(atom),
        };
        out.push(pred);
    }
    if out.is_empty() && !body.is_empty() {
        out.push(term_predicate(body));
    }
    out
}

fn term_predicate(term: &str) -> Predicate {
    Predicate {
        term: term.to_string(),
        comparator: Comparator::Present,
        threshold: None,
    }
}

/// An "IF ... THEN ..." sentence: an IF word followed later by a THEN word.
pub fn has_if_then(text: &str) -> bool {
    let w = words(text);
    let Some(i) = w.iter().position(|x| x == "if") else {
        return false;
    };
    // Non-empty trigger between IF and THEN, non-empty action after THEN.
    w.iter()
        .enumerate()
        .skip(i + 2)
        .any(|(j, x)| x == "then" && j + 1 < w.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalRule {
    pub rule_id: String,
    pub category: String,
    pub trigger_condition: String,
    pub action_directive: String,
    pub rule_text: String,
    pub trigger_predicates: Vec<Predicate>,
}

impl GlobalRule {
    pub fn new(
        rule_id: impl Into<String>,
        category: impl Into<String>,
        trigger_condition: impl Into<String>,
        action_directive: impl Into<String>,
        rule_text: impl Into<String>,
    ) -> Result<Self, MemoryError> {
        let rule = GlobalRule {
            rule_id: rule_id.into().trim().to_string(),
            category: category.into().trim().to_string(),
            trigger_condition: trigger_condition.into().trim().to_string(),
            action_directive: action_directive.into().trim().to_string(),
            rule_text: rule_text.into().trim().to_string(),
            trigger_predicates: Vec::new(),
        };
        rule.with_parsed_trigger()
    }

    fn with_parsed_trigger(mut self) -> Result<Self, MemoryError> {
        self.trigger_predicates = parse_trigger(&self.trigger_condition);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), MemoryError> {
        if self.rule_id.is_empty() {
            return Err(MemoryError::MalformedRule("empty rule_id".into()));
        }
        if !has_if_then(&self.rule_text) {
            return Err(MemoryError::MalformedRule(format!("{}: rule_text lacks IF/THEN", self.rule_id)));
        }
        Ok(())
    }

    /// Any atomic predicate fires.
    pub fn is_triggered(&self, bundle: &EventBundle, individual: &IndividualProtocol) -> bool {
        self.trigger_predicates.iter().any(|p| p.matches(bundle, individual))
    }
}
