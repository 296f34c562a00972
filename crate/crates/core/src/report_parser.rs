//! Isolates the observation (findings) and impression sections of a report.
//!
//! Headers are matched at line starts, case-insensitively, optionally
//! preceded by markdown `#` marks and followed by a colon or the end of the
//! line. Everything from the first terminator header (by default
//! `Disclosure`) onward is ignored.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::ReportDocument;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SectionRules {
    pub observation_headers: Vec<String>,
    pub impression_headers: Vec<String>,
    /// Headers that end every section and cut off the rest of the report.
    pub terminator_headers: Vec<String>,
}

impl Default for SectionRules {
    fn default() -> Self {
        let owned = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        SectionRules {
            observation_headers: owned(&["Observation", "Observations", "Findings"]),
            impression_headers: owned(&["Impression"]),
            terminator_headers: owned(&["Disclosure"]),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("report {id}: {reason}")]
    NoObservation { id: String, reason: String },
    #[error("empty report text")]
    EmptyReport,
    #[error("section rules: {0}")]
    InvalidRules(String),
}

/// Compiled form of [`SectionRules`].
#[derive(Debug, Clone)]
pub struct SectionParser {
    observation: Regex,
    impression: Regex,
    terminator: Regex,
}

fn header_regex(headers: &[String], what: &str) -> Result<Regex, ParseError> {
    let words: Vec<String> = headers
        .iter()
        .map(|h| h.trim())
        .filter(|h| !h.is_empty())
        .map(regex::escape)
        .collect();
    if words.is_empty() {
        return Err(ParseError::InvalidRules(format!("no {what} headers")));
    }
    // The header word must be followed by a colon or the end of its line,
    // so prose such as "Findings are stable" is not a header.
    let pattern = format!(
        r"(?im)^[ \t]*(?:#+[ \t]*)?(?:{})[ \t]*(?::|$)",
        words.join("|")
    );
    Regex::new(&pattern).map_err(|e| ParseError::InvalidRules(e.to_string()))
}

impl SectionParser {
    pub fn new(rules: &SectionRules) -> Result<Self, ParseError> {
        Ok(SectionParser {
            observation: header_regex(&rules.observation_headers, "observation")?,
            impression: header_regex(&rules.impression_headers, "impression")?,
            terminator: header_regex(&rules.terminator_headers, "terminator")?,
        })
    }

    pub fn parse(&self, id: &str, raw_text: &str) -> Result<ReportDocument, ParseError> {
        if raw_text.trim().is_empty() {
            return Err(ParseError::EmptyReport);
        }
        let cutoff = self.terminator.find(raw_text).map_or(raw_text.len(), |m| m.start());
        let text = &raw_text[..cutoff];

        let no_observation = |reason: &str| ParseError::NoObservation {
            id: id.to_string(),
            reason: reason.to_string(),
        };
        let observation = section_body(text, &self.observation, &self.impression)
            .ok_or_else(|| no_observation("no observation header found"))?;
        if observation.is_empty() {
            return Err(no_observation("observation section is empty"));
        }
        let impression = section_body(text, &self.impression, &self.observation)
            .filter(|body| !is_no_impression(body))
            .map(str::to_string);

        Ok(ReportDocument {
            id: id.to_string(),
            raw_text: raw_text.to_string(),
            observation: observation.to_string(),
            impression,
        })
    }
}

/// Body after the first `header` match, up to the next `stop` header or the
/// end of `text`, trimmed.
fn section_body<'a>(text: &'a str, header: &Regex, stop: &Regex) -> Option<&'a str> {
    let start = header.find(text)?.end();
    let rest = &text[start..];
    let end = stop.find(rest).map_or(rest.len(), |m| m.start());
    Some(rest[..end].trim())
}

fn is_no_impression(body: &str) -> bool {
    let body = body.trim().trim_end_matches('.').trim();
    body.is_empty() || body.eq_ignore_ascii_case("no impression")
}

static DEFAULT_PARSER: LazyLock<SectionParser> =
    LazyLock::new(|| SectionParser::new(&SectionRules::default()).expect("default rules compile"));

impl SectionParser {
    /// Parser for [`SectionRules::default`], compiled once.
    pub fn default_rules() -> &'static SectionParser {
        &DEFAULT_PARSER
    }
}

/// Compiles `rules` and parses one report. Prefer a reused [`SectionParser`]
/// for batches.
pub fn extract_sections(
    id: &str,
    raw_text: &str,
    rules: &SectionRules,
) -> Result<ReportDocument, ParseError> {
    SectionParser::new(rules)?.parse(id, raw_text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TWO_LESION_REPORT: &str = "Observation:\nAt the right 9:00 axis, 1 cm from the nipple, there is a 0.4 cm simple cyst. At the left 6:00 retroareolar location, there is a 0.6 x 0.4 x 0.6 cm hypoechoic mass.\n\nImpression:\nPROBABLY BENIGN - FOLLOW-UP RECOMMENDED Left 6:00 retroareolar 0.6 cm hypoechoic mass.\n";

    fn parse(text: &str) -> Result<ReportDocument, ParseError> {
        extract_sections("r1", text, &SectionRules::default())
    }

    #[test]
    fn splits_sections() {
        let doc = parse(TWO_LESION_REPORT).unwrap();
        assert!(doc.observation.starts_with("At the right 9:00 axis"));
        assert!(doc.observation.ends_with("hypoechoic mass."));
        assert!(doc
            .impression
            .as_deref()
            .unwrap()
            .starts_with("PROBABLY BENIGN - FOLLOW-UP RECOMMENDED"));
    }

    #[test]
    fn inline_headers_and_no_impression() {
        let doc = parse("Observation: There is a 3 x 2 mm cyst in the left breast 3:00 N9 location.\n\nImpression: No Impression\n").unwrap();
        assert_eq!(doc.observation, "There is a 3 x 2 mm cyst in the left breast 3:00 N9 location.");
        assert_eq!(doc.impression, None);
    }

    #[test]
    fn missing_observation_is_rejected() {
        let err = parse("Impression: text only, no findings").unwrap_err();
        assert!(matches!(err, ParseError::NoObservation { .. }));
        assert_eq!(parse("  \n"), Err(ParseError::EmptyReport));
    }

    #[test]
    fn headers_are_case_insensitive_and_markdown_tolerant() {
        let doc = parse("EXAM: US\n#### FINDINGS:\nA cyst.\n#### impression:\nBenign.\n").unwrap();
        assert_eq!(doc.observation, "A cyst.");
        assert_eq!(doc.impression.as_deref(), Some("Benign."));
    }

    #[test]
    fn prose_starting_with_header_word_is_not_a_header() {
        let doc = parse("Findings:\nFindings are stable.\nImpression:\nBenign.").unwrap();
        assert_eq!(doc.observation, "Findings are stable.");
    }

    #[test]
    fn disclosure_cuts_off_the_rest() {
        let doc = parse("Observation:\nA cyst.\nDisclosure: reviewed.\nImpression: ignored\n").unwrap();
        assert_eq!(doc.observation, "A cyst.");
        assert_eq!(doc.impression, None);
    }

    #[test]
    fn empty_rules_are_rejected() {
        let rules = SectionRules { impression_headers: vec![], ..SectionRules::default() };
        assert!(matches!(SectionParser::new(&rules), Err(ParseError::InvalidRules(_))));
    }

    proptest! {
        #[test]
        fn sections_are_verbatim_substrings(
            obs in "[A-Za-z0-9 ,.:]{1,60}",
            imp in "[A-Za-z0-9 ,.:]{0,60}",
            tail in "[A-Za-z0-9 ,.:\n]{0,60}",
        ) {
            prop_assume!(!obs.trim().is_empty());
            let text = format!("Observation:\n{obs}\nImpression:\n{imp}\nDisclosure:\n{tail}");
            let doc = parse(&text).unwrap();
            prop_assert!(text.contains(&doc.observation));
            prop_assert_eq!(doc.observation.as_str(), obs.trim());
            if let Some(i) = &doc.impression {
                prop_assert!(text.contains(i.as_str()));
            }
            // Content after the disclosure header never matters.
            let other = format!("Observation:\n{obs}\nImpression:\n{imp}\nDisclosure:\nImpression: x");
            let doc2 = parse(&other).unwrap();
            prop_assert_eq!(doc.observation, doc2.observation);
            prop_assert_eq!(doc.impression, doc2.impression);
        }
    }
}
