use std::collections::BTreeMap;

use serde_json::Value;

use crate::agents::bullet_list;
use crate::backend::{extract_json, Backend, ChatRequest, TemplateId, TemplateSet};

/// Score from a judge reply: JSON `score` (number or numeric string) or a
/// bare integer, clamped to `[1, 5]`. Prose yields `None`.
pub fn parse_judge_score(text: &str) -> Option<u8> {
    let raw = match extract_json(text) {
        Ok(v) => match v.get("score")? {
            Value::Number(n) => n.as_f64()?,
            Value::String(s) => s.trim().parse().ok()?,
            _ => return None,
        },
        Err(_) => text.trim().parse::<f64>().ok()?,
    };
    raw.is_finite().then(|| raw.round().clamp(1.0, 5.0) as u8)
}

/// Plan-level acceptability of `pred` against `truth`, 1 to 5.
pub fn clinical_equivalence(judge: &dyn Backend, templates: &TemplateSet, pred: &[String], truth: &[String], context: &str) -> Option<u8> {
    let bindings = BTreeMap::from([
        ("context_text", context.to_string()),
        ("predicted_actions_list", bullet_list(pred)),
        ("actual_actions_list", bullet_list(truth)),
    ]);
    let prompt = templates.render(TemplateId::Judge, &bindings).ok()?;
    let mut req = ChatRequest::new(TemplateId::Judge, prompt);
    req.want_logprobs = false;
    match judge.complete(&req) {
        Ok(resp) => parse_judge_score(&resp.text),
        Err(e) => {
            tracing::warn!(error = %e, "judge call failed");
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockEntry, MockScript};
    use serde_json::json;

    #[test]
    fn score_parsing() {
        assert_eq!(parse_judge_score(r#"{"score": 4, "rationale": "ok"}"#), Some(4));
        assert_eq!(parse_judge_score("7"), Some(5));
        assert_eq!(parse_judge_score("0"), Some(1));
        assert_eq!(parse_judge_score(r#"{"score": "3"}"#), Some(3));
        assert_eq!(parse_judge_score("The plan is reasonable."), None);
    }

    #[test]
    fn scripted_judge() {
        let script = MockScript::new(vec![MockEntry::reply(TemplateId::Judge, &[], json!({"score": 5}))]);
        let mock = MockBackend::new(script);
        let a = vec!["Blood cultures".to_string()];
        assert_eq!(clinical_equivalence(&mock, &TemplateSet::default(), &a, &a, "ctx"), Some(5));
    }
}
