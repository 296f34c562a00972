//! Turns a backend's raw reply into a lesion list.
//!
//! A reply is "jsonable" when, after stripping a markdown code fence and any
//! prose around the outermost brackets, it parses as a list whose every
//! element is an object. A bare object is not a list and is rejected.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::schema::{LesionRecord, Normalizer};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseOutcome {
    /// `None` when the reply is not a valid list of records.
    pub records: Option<Vec<LesionRecord>>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct OutputParser {
    pub strip_fences: bool,
    pub normalizer: Normalizer,
}

impl Default for OutputParser {
    fn default() -> Self {
        OutputParser { strip_fences: true, normalizer: Normalizer::default() }
    }
}

/// Content of the first fenced block, without its info string; the input
/// unchanged when there is no complete fence.
fn strip_code_fence(raw: &str) -> &str {
    let Some(open) = raw.find("```") else {
        return raw;
    };
    let after = &raw[open + 3..];
    // Skip the info string (e.g. "json") up to the end of the line.
    let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
    let body = &after[body_start..];
    match body.find("```") {
        Some(close) => &body[..close],
        None => raw,
    }
}

impl OutputParser {
    /// The JSON list carried by `raw`, if there is one.
    fn list_value(&self, raw: &str) -> Option<Vec<Value>> {
        let text = if self.strip_fences { strip_code_fence(raw) } else { raw };
        let text = text.trim();
        let value = match serde_json::from_str::<Value>(text) {
            Ok(value) => value,
            Err(_) => {
                let start = text.find('[')?;
                let end = text.rfind(']')?;
                if end < start {
                    return None;
                }
                serde_json::from_str(&text[start..=end]).ok()?
            }
        };
        match value {
            Value::Array(items) if items.iter().all(Value::is_object) => Some(items),
            _ => None,
        }
    }

    pub fn is_jsonable(&self, raw: &str) -> bool {
        self.list_value(raw).is_some()
    }

    pub fn parse(&self, raw: &str) -> ParseOutcome {
        let Some(items) = self.list_value(raw) else {
            return ParseOutcome {
                records: None,
                diagnostics: vec!["reply is not a valid list of records".to_string()],
            };
        };
        let mut records = Vec::with_capacity(items.len());
        let mut diagnostics = Vec::new();
        for (i, item) in items.iter().enumerate() {
            // `list_value` guarantees objects, so coercion cannot fail here.
            let (record, warnings) = LesionRecord::from_mapping(item, &self.normalizer)
                .expect("list elements are objects");
            diagnostics.extend(warnings.into_iter().map(|w| format!("lesion {i}: {w}")));
            records.push(record);
        }
        ParseOutcome { records: Some(records), diagnostics }
    }
}

pub fn is_jsonable(raw: &str) -> bool {
    OutputParser::default().is_jsonable(raw)
}

pub fn parse_model_output(raw: &str) -> ParseOutcome {
    OutputParser::default().parse(raw)
}

/// Canonical serialization of a lesion list, as emitted by the rule
/// backend and written into dataset labels.
pub fn serialize_lesions(records: &[LesionRecord]) -> String {
    serde_json::to_string(records).expect("records always serialize")
}

/// Multi-line form of [`serialize_lesions`] for prompts.
pub fn serialize_lesions_pretty(records: &[LesionRecord]) -> String {
    serde_json::to_string_pretty(records).expect("records always serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{AttributeKey, NA};
    use proptest::prelude::*;

    #[test]
    fn predicate_examples() {
        assert!(is_jsonable("[]"));
        assert!(is_jsonable("```\n[{}]\n```"));
        assert!(is_jsonable("```json\n[{\"type\": \"cyst\"}]\n```"));
        assert!(is_jsonable("Here you go:\n[{\"type\": \"cyst\"}]\nHope this helps."));
        assert!(!is_jsonable("the lesion is benign"));
        assert!(!is_jsonable("{\"type\": \"cyst\"}"));
        assert!(!is_jsonable("{\"lesions\": [{\"type\": \"cyst\"}]}"));
        assert!(!is_jsonable("[1, 2]"));
        assert!(!is_jsonable("[{\"a\": 1},]"));
        assert!(!is_jsonable("] oops ["));
        assert!(!is_jsonable("[{'type': 'cyst'}]"));
    }

    #[test]
    fn fences_can_be_kept() {
        let strict = OutputParser { strip_fences: false, ..OutputParser::default() };
        // Brackets inside the fence are still found by the outermost-bracket rule.
        assert!(strict.is_jsonable("```\n[{}]\n```"));
        assert!(!strict.is_jsonable("```\n[{}]\n``` and [x]"));
        assert!(OutputParser::default().is_jsonable("```\n[{}]\n``` and [x]"));
    }

    #[test]
    fn empty_object_becomes_all_na() {
        let outcome = parse_model_output("[{}]");
        let records = outcome.records.unwrap();
        assert_eq!(records.len(), 1);
        assert!(AttributeKey::ALL.iter().all(|&k| records[0].get(k) == NA));
    }

    #[test]
    fn bare_object_is_absent() {
        let outcome = parse_model_output("{\"type\": \"cyst\"}");
        assert_eq!(outcome.records, None);
        assert!(!outcome.diagnostics.is_empty());
    }

    #[test]
    fn unknown_fields_are_reported() {
        let outcome = parse_model_output("[{\"type\": \"Cyst\", \"size\": \"1 cm\"}]");
        assert_eq!(outcome.records.unwrap()[0].get(AttributeKey::LesionType), "cyst");
        assert_eq!(outcome.diagnostics, vec!["lesion 0: unknown field size dropped"]);
    }

    fn any_record() -> impl Strategy<Value = LesionRecord> {
        proptest::collection::vec("[a-zA-Z0-9 ./:_-]{0,10}", 16).prop_map(|raws| {
            let mut record = LesionRecord::empty();
            for (key, raw) in AttributeKey::ALL.into_iter().zip(&raws) {
                record.set(key, raw);
            }
            record
        })
    }

    proptest! {
        #[test]
        fn parse_present_iff_jsonable(raw in "\\PC{0,40}") {
            prop_assert_eq!(parse_model_output(&raw).records.is_some(), is_jsonable(&raw));
        }

        #[test]
        fn reserialization_is_a_fixed_point(records in proptest::collection::vec(any_record(), 0..4)) {
            let once = parse_model_output(&serialize_lesions(&records)).records.unwrap();
            prop_assert_eq!(&once, &records);
            let twice = parse_model_output(&serialize_lesions_pretty(&once)).records.unwrap();
            prop_assert_eq!(twice, once);
        }
    }
}
