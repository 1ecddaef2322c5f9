//! Section renderers that hold each prompt slot within its token allocation.

use serde_json::{Map, Value};

use crate::memory::{GlobalRule, IndividualProtocol, Tokenizer};

/// A fitted rendering of the individual protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct IndividualView {
    pub text: String,
    pub tokens: usize,
    /// State ids (`S-01`, …) present in `text`; empty when rendered without ids.
    pub state_ids: Vec<String>,
}

fn hard_cap(text: String, budget: usize, tok: &dyn Tokenizer) -> String {
    if tok.count(&text) <= budget {
        text
    } else {
        tok.truncate(&text, budget).to_string()
    }
}

/// A state field name and its items, each with an optional display id.
type Field<'a> = (&'a str, Vec<(Option<String>, String)>);

/// Individual protocol as JSON within `budget`. Whole fields are dropped in
/// the order history, trends, procedures; then trailing items of the longest
/// remaining list. With `with_ids`, each item is prefixed by a stable
/// `[S-nn]` id numbered over the full protocol.
pub fn fit_individual(ip: &IndividualProtocol, budget: usize, tok: &dyn Tokenizer, with_ids: bool) -> IndividualView {
    let history: Vec<String> = ip
        .history
        .iter()
        .map(|h| match h.resolved_at {
            Some(ts) => format!("{} (resolved {})", h.item, ts.format("%Y-%m-%d %H:%M")),
            None => h.item.clone(),
        })
        .collect();
    let raw: [(&str, &[String]); 5] = [
        ("active_problems", &ip.active_problems),
        ("current_meds", &ip.current_meds),
        ("procedures", &ip.procedures),
        ("trends", &ip.trends),
        ("history", &history),
    ];
    let mut next_id = 0usize;
    let mut fields: Vec<Field<'_>> = raw
        .iter()
        .map(|(name, items)| {
            let items = items
                .iter()
                .map(|item| {
                    next_id += 1;
                    let id = with_ids.then(|| format!("S-{next_id:02}"));
                    (id, item.clone())
                })
                .collect();
            (*name, items)
        })
        .collect();

    let render = |fields: &[Field<'_>]| -> String {
        let mut obj = Map::new();
        for (name, items) in fields {
            let list = items
                .iter()
                .map(|(id, item)| match id {
                    Some(id) => Value::String(format!("[{id}] {item}")),
                    None => Value::String(item.clone()),
                })
                .collect();
            obj.insert(name.to_string(), Value::Array(list));
        }
        serde_json::to_string_pretty(&Value::Object(obj)).expect("json serializes")
    };

    let mut text = render(&fields);
    for drop in ["history", "trends", "procedures"] {
        if tok.count(&text) <= budget {
            break;
        }
        fields.retain(|(name, _)| *name != drop);
        text = render(&fields);
    }
    while tok.count(&text) > budget {
        let Some(longest) = fields.iter_mut().filter(|(_, items)| !items.is_empty()).max_by_key(|(_, items)| items.len())
        else {
            break;
        };
        longest.1.pop();
        text = render(&fields);
    }
    let text = hard_cap(text, budget, tok);
    let state_ids = fields
        .iter()
        .flat_map(|(_, items)| items.iter().filter_map(|(id, _)| id.clone()))
        .filter(|id| text.contains(&format!("[{id}]")))
        .collect();
    IndividualView {
        tokens: tok.count(&text),
        text,
        state_ids,
    }
}

/// One line per rule. Longest rules are dropped first until the text fits.
pub fn fit_rules(rules: &[&GlobalRule], budget: usize, tok: &dyn Tokenizer, line: impl Fn(&GlobalRule) -> String) -> String {
    let mut lines: Vec<(usize, String)> = rules.iter().map(|r| line(r)).enumerate().collect();
    let join = |lines: &[(usize, String)]| lines.iter().map(|(_, l)| l.as_str()).collect::<Vec<_>>().join("\n");
    let mut text = join(&lines);
    while tok.count(&text) > budget && lines.len() > 1 {
        let (pos, _) = lines
            .iter()
            .enumerate()
            .max_by_key(|(i, (_, l))| (tok.count(l), *i))
            .expect("nonempty");
        lines.remove(pos);
        text = join(&lines);
    }
    if text.is_empty() {
        text = "(none)".to_string();
    }
    hard_cap(text, budget, tok)
}

/// Newest-first selection of `entries` (oldest first on input) within
/// `budget`, rendered chronologically. A lone entry that alone exceeds the
/// budget is truncated.
pub fn fit_buffer(entries: &[&str], budget: usize, tok: &dyn Tokenizer) -> String {
    let mut kept: Vec<&str> = Vec::new();
    for entry in entries.iter().rev() {
        let mut candidate = kept.clone();
        candidate.push(entry);
        let text = candidate.iter().rev().copied().collect::<Vec<_>>().join("\n\n");
        if tok.count(&text) > budget {
            break;
        }
        kept = candidate;
    }
    if kept.is_empty() {
        return match entries.last() {
            Some(last) => tok.truncate(last, budget).to_string(),
            None => String::new(),
        };
    }
    kept.reverse();
    kept.join("\n\n")
}

pub fn bullet_list(items: &[String]) -> String {
    if items.is_empty() {
        return "(none)".to_string();
    }
    items.iter().map(|i| format!("- {i}")).collect::<Vec<_>>().join("\n")
}
