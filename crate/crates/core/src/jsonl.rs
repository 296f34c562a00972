//! Line-delimited JSON: one compact value per line, `\n` terminated.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("line {line}: {source}")]
    Malformed { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn to_jsonl_string<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(mut w: impl Write, items: &[T]) -> std::io::Result<()> {
    w.write_all(to_jsonl_string(items).as_bytes())
}

/// Reads one value per non-blank line. Line numbers in errors are 1-based.
pub fn read_jsonl<T: DeserializeOwned>(r: impl BufRead) -> Result<Vec<T>, JsonlError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| JsonlError::Malformed { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn from_jsonl_str<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, JsonlError> {
    read_jsonl(text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::{json, Value};

    #[test]
    fn malformed_line_is_indexed() {
        let err = from_jsonl_str::<Value>("{\"a\":1}\n\nnot json\n").unwrap_err();
        assert!(matches!(err, JsonlError::Malformed { line: 3, .. }));
    }

    #[test]
    fn round_trip() {
        let items = vec![json!({"b": "x\ny", "a": [1, 2]}), json!("é")];
        let text = to_jsonl_string(&items);
        assert_eq!(text.lines().count(), 2);
        let back: Vec<Value> = from_jsonl_str(&text).unwrap();
        assert_eq!(back, items);
        assert_eq!(to_jsonl_string(&back), text);
    }
}
