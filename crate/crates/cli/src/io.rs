//! Record files and atomic writes.

use std::fs;
use std::io::{BufReader, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use burex_core::jsonl::{read_jsonl, to_jsonl_string};
use burex_core::report_parser::SectionParser;
use burex_core::schema::{LesionRecord, ReportDocument};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Writes through a temporary file in the destination directory, then
/// renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_records<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_atomic(path, to_jsonl_string(items).as_bytes())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_jsonl(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

/// A raw report as written by `gen`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
}

/// Ground truth for one report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub id: String,
    pub lesions: Vec<LesionRecord>,
}

/// Output of `parse`; also accepted wherever reports are read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionRecord {
    pub id: String,
    pub observation: String,
    pub impression: Option<String>,
}

impl From<&ReportDocument> for SectionRecord {
    fn from(doc: &ReportDocument) -> Self {
        SectionRecord { id: doc.id.clone(), observation: doc.observation.clone(), impression: doc.impression.clone() }
    }
}

/// A report input before section parsing.
pub enum RawReport {
    Text(TextRecord),
    Sections(SectionRecord),
}

/// Reads a report file: line-delimited `{id, text}` or `{id, observation,
/// impression}` records, or else a single plain-text report whose id is the
/// file stem.
pub fn read_raw_reports(path: &Path) -> Result<Vec<RawReport>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let first = text.lines().find(|l| !l.trim().is_empty());
    let is_records = first.is_some_and(|l| matches!(serde_json::from_str::<Value>(l), Ok(Value::Object(_))));
    if !is_records {
        let id = path.file_stem().map_or("report".into(), |s| s.to_string_lossy().into_owned());
        return Ok(vec![RawReport::Text(TextRecord { id, text })]);
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let value: Value = serde_json::from_str(line).with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        let record = if value.get("observation").is_some() {
            RawReport::Sections(serde_json::from_value(value).with_context(|| format!("{}: line {}", path.display(), i + 1))?)
        } else if value.get("text").is_some() {
            RawReport::Text(serde_json::from_value(value).with_context(|| format!("{}: line {}", path.display(), i + 1))?)
        } else {
            bail!("{}: line {}: expected {{id, text}} or {{id, observation, impression}}", path.display(), i + 1);
        };
        out.push(record);
    }
    Ok(out)
}

/// Reads reports and isolates their sections. Reports without an
/// observation section are an error.
pub fn read_reports(path: &Path, parser: &SectionParser) -> Result<Vec<ReportDocument>> {
    read_raw_reports(path)?
        .into_iter()
        .map(|raw| match raw {
            RawReport::Text(t) => parser.parse(&t.id, &t.text).map_err(anyhow::Error::from),
            RawReport::Sections(s) => Ok(ReportDocument::from_sections(s.id, s.observation, s.impression)),
        })
        .collect()
}
