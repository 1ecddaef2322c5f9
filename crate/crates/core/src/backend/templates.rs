use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use super::TemplateId;

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("unbound template slot `{0}`")]
    UnboundSlot(String),
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("template file {path}: {reason}")]
    Io { path: String, reason: String },
}

const REFLECTOR: &str = include_str!("../../templates/reflector.txt");
const ROUTER: &str = include_str!("../../templates/router.txt");
const REASONER: &str = include_str!("../../templates/reasoner.txt");
const AUDITOR: &str = include_str!("../../templates/auditor.txt");
const STEWARD: &str = include_str!("../../templates/steward.txt");
const JUDGE: &str = include_str!("../../templates/judge.txt");

/// Byte ranges and names of `{{ name }}` slots, in order of appearance.
fn scan_slots(template: &str) -> Vec<(usize, usize, &str)> {
    let mut out = Vec::new();
    let mut pos = 0;
    while let Some(open) = template[pos..].find("{{").map(|i| i + pos) {
        let Some(close) = template[open + 2..].find("}}").map(|i| i + open + 2) else {
            break;
        };
        let name = template[open + 2..close].trim();
        if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            out.push((open, close + 2, name));
            pos = close + 2;
        } else {
            pos = open + 2;
        }
    }
    out
}

pub fn template_slots(template: &str) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for (_, _, name) in scan_slots(template) {
        if !names.iter().any(|n| n == name) {
            names.push(name.to_string());
        }
    }
    names
}

/// Substitute every slot with its bound value, verbatim, in one pass.
/// Bound values are never re-scanned for slots.
pub fn render_template(template: &str, bindings: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len() + bindings.values().map(String::len).sum::<usize>());
    let mut last = 0;
    for (start, end, name) in scan_slots(template) {
        let value = bindings.get(name).ok_or_else(|| TemplateError::UnboundSlot(name.to_string()))?;
        out.push_str(&template[last..start]);
        out.push_str(value);
        last = end;
    }
    out.push_str(&template[last..]);
    Ok(out)
}

/// The prompt texts for every role, built-in unless overridden from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    texts: BTreeMap<TemplateId, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        let texts = [
            (TemplateId::Reflector, REFLECTOR),
            (TemplateId::Router, ROUTER),
            (TemplateId::Reasoner, REASONER),
            (TemplateId::Auditor, AUDITOR),
            (TemplateId::Steward, STEWARD),
            (TemplateId::Judge, JUDGE),
        ]
        .into_iter()
        .map(|(id, t)| (id, t.to_string()))
        .collect();
        TemplateSet { texts }
    }
}

impl TemplateSet {
    /// Replace built-ins with `<dir>/<role>.txt` files where present.
    pub fn with_overrides(mut self, dir: &Path) -> Result<Self, TemplateError> {
        for id in TemplateId::ALL {
            let path = dir.join(format!("{}.txt", id.file_stem()));
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                })?;
                self.texts.insert(id, text);
            }
        }
        Ok(self)
    }

    pub fn text(&self, id: TemplateId) -> &str {
        &self.texts[&id]
    }

    pub fn by_name(&self, name: &str) -> Result<&str, TemplateError> {
        TemplateId::ALL
            .iter()
            .find(|id| id.file_stem().eq_ignore_ascii_case(name))
            .map(|id| self.text(*id))
            .ok_or_else(|| TemplateError::UnknownTemplate(name.to_string()))
    }

    pub fn render(&self, id: TemplateId, bindings: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        render_template(self.text(id), bindings)
    }

    /// The template with every slot bound to the empty string.
    pub fn shell(&self, id: TemplateId) -> String {
        let text = self.text(id);
        let empty: BTreeMap<&str, String> = scan_slots(text).into_iter().map(|(_, _, n)| (n, String::new())).collect();
        render_template(text, &empty).expect("all slots bound")
    }
}
