//! Deterministic rule-based extractor.
//!
//! The observation is split into sentences. A sentence describes a lesion
//! when it is not negated and carries both a location anchor (side, clock
//! position, distance from the nipple or an anatomical region) and a lesion
//! cue (a lesion type or a generic noun such as "lesion"). Descriptive
//! attributes are read from the part of the sentence before any reference
//! to prior findings. Impression sentences are linked to lesions by exact
//! (side, clock) match, then by a side that has a single lesion; sentences
//! without any location continue the previous link.

use std::sync::LazyLock;

use regex::Regex;

use super::{BackendError, ExtractionOutput, Extractor};
use crate::output_normalizer::{serialize_lesions, OutputParser};
use crate::schema::{AttributeKey, LesionRecord, ReportDocument, NA};

pub const RULES_BACKEND: &str = "rules";

/// Canonical value and the pattern that signals it. The first capture
/// group, when present, must be the number (clock/distance).
struct Term {
    value: &'static str,
    pattern: Regex,
}

fn terms(table: &[(&'static str, &str)]) -> Vec<Term> {
    table
        .iter()
        .map(|(value, pattern)| Term {
            value,
            pattern: Regex::new(&format!("(?i){pattern}")).expect("valid term pattern"),
        })
        .collect()
}

/// Earliest match in `text`; ties go to the longer match, then to table
/// order.
fn first_term(text: &str, table: &[Term]) -> Option<&'static str> {
    table
        .iter()
        .filter_map(|t| t.pattern.find(text).map(|m| (m.start(), std::cmp::Reverse(m.len()), t.value)))
        .min_by_key(|&(start, len, _)| (start, len))
        .map(|(_, _, value)| value)
}

static SIDE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(left|right)\b").unwrap());
static CLOCK: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(1[0-2]|0?[1-9])(?:\s*:\s*[0-5][0-9]|\s*o['’]?\s*clock)").unwrap()
});
static DISTANCE_CM: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b([0-9]+(?:\.[0-9]+)?)\s*cm\s+(?:from\s+(?:the\s+)?nipple|fn\b)").unwrap()
});
// Radiology shorthand "N9": nine centimeters from the nipple. Uppercase only.
static DISTANCE_N: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\bN\s?([0-9]+(?:\.[0-9]+)?)\b").unwrap());
static GENERIC_CUE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(?:lesion|finding|abnormality|area)s?\b").unwrap());
static NEGATION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^\s*(?:no|there\s+(?:is|are)\s+no|negative\s+for|without\s+evidence)\b").unwrap()
});
// Text after these cues talks about prior exams or differentials, not the
// lesion being described.
static REFERENCE_CUE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(?:corresponding\s+to|may\s+represent|previously|previous|compared\s+(?:to|with)|as\s+seen\s+on)\b")
        .unwrap()
});

struct Patterns {
    region: Vec<Term>,
    lesion_type: Vec<Term>,
    depth: Vec<Term>,
    shape: Vec<Term>,
    orientation: Vec<Term>,
    margins: Vec<Term>,
    echogenicity: Vec<Term>,
    calcifications: Vec<Term>,
    vascularity: Vec<Term>,
    posterior: Vec<Term>,
    suspicion: Vec<Term>,
    subtype: Vec<Term>,
    next_step: Vec<Term>,
}

static PATTERNS: LazyLock<Patterns> = LazyLock::new(|| Patterns {
    region: terms(&[
        ("retroareolar", r"\bretroareolar\b"),
        ("axillary tail", r"\baxillary\s+tail\b"),
        ("periareolar", r"\bperiareolar\b"),
        ("subareolar", r"\bsubareolar\b"),
        ("retropectoral", r"\bretropectoral\b"),
    ]),
    lesion_type: terms(&[
        ("post-surgical change", r"\bpost-?\s?surgical\s+changes?\b"),
        ("post-biopsy", r"\bpost-?\s?biopsy\b"),
        ("lymph node", r"\blymph\s+nodes?\b"),
        ("nodule", r"\bnodules?\b"),
        ("cyst", r"\bcysts?\b"),
        ("mass", r"\bmass(?:es)?\b"),
        ("scar", r"\bscars?\b"),
        ("duct", r"\bducts?\b"),
        ("seroma", r"\bseromas?\b"),
    ]),
    depth: terms(&[
        ("posterior", r"\bposterior\s+(?:depth|third|layer)\b|\bdepth\s*(?::|of|is)?\s*posterior\b"),
        ("middle", r"\bmiddle\s+(?:depth|third|layer)\b|\bdepth\s*(?::|of|is)?\s*middle\b"),
        ("anterior", r"\banterior\s+(?:depth|third|layer)\b|\bdepth\s*(?::|of|is)?\s*anterior\b"),
    ]),
    shape: terms(&[
        ("oval", r"\boval\b"),
        ("round", r"\bround\b"),
        ("irregular", r"\birregular(?:ly)?\s+(?:in\s+)?shaped?\b|\bshape\s*(?::|is)?\s*irregular\b"),
    ]),
    orientation: terms(&[
        (
            "non-parallel",
            r"\b(?:non-?\s?parallel|not\s+parallel)\s+(?:orientation|to\s+the\s+skin)\b|\borientation\s*(?::|is)?\s*(?:non-?\s?parallel|not\s+parallel)\b",
        ),
        (
            "parallel",
            r"\bparallel\s+(?:orientation|to\s+the\s+skin)\b|\borientation\s*(?::|is)?\s*parallel\b",
        ),
        ("other", r"\bother\s+orientation\b|\borientation\s*(?::|is)?\s*other\b"),
    ]),
    margins: terms(&[
        ("circumscribed", r"\bcircumscribed\b"),
        ("obscured", r"\bobscured\b"),
        ("angular", r"\bangular\b"),
        ("microlobulated", r"\bmicrolobulated\b"),
        ("spiculated", r"\bspiculated\b"),
        ("lobulated", r"\blobulated\s+margins?\b|\bmargins?\s*(?::|are|is)?\s*lobulated\b"),
        ("irregular", r"\birregular\s+margins?\b|\bmargins?\s*(?::|are|is)?\s*irregular\b"),
        ("septated", r"\bseptated\b"),
    ]),
    echogenicity: terms(&[
        ("anechoic", r"\banechoic\b"),
        ("hyperechoic", r"\bhyperechoic\b"),
        ("hypoechoic", r"\bhypoechoic\b"),
        ("isoechoic", r"\bisoechoic\b"),
        ("heterogeneous", r"\bheterogeneous(?:ly)?\b"),
        ("solid", r"\bsolid\b"),
    ]),
    calcifications: terms(&[
        (
            "no",
            r"\b(?:no|without|negative\s+for)\s+(?:associated\s+|internal\s+)?(?:micro)?calcifications?\b",
        ),
        ("yes", r"\b(?:micro)?calcifications?\b|\bcalcified\b"),
    ]),
    vascularity: terms(&[
        (
            "absent",
            r"\b(?:no|without)\s+(?:internal\s+|detectable\s+)?(?:vascularity|vascular\s+flow|blood\s+flow)\b|\bavascular\b|\bvascularity\s+(?:is\s+)?absent\b",
        ),
        (
            "present",
            r"\bvascularity\s+(?:is\s+)?present\b|\b(?:internal\s+)?(?:vascularity|vascular\s+flow)\b|\bhypervascular\b",
        ),
    ]),
    posterior: terms(&[
        ("n/a", r"\b(?:no|without)\s+(?:posterior\s+)?(?:acoustic\s+)?(?:enhancement|shadowing)\b"),
        ("enhancement", r"\benhancement\b"),
        ("shadowing", r"\bshadowing\b"),
    ]),
    suspicion: terms(&[
        ("probably benign", r"\bprobably\s+benign\b"),
        ("low", r"\blow(?:\s+|-)suspicion\b"),
        ("moderate", r"\bmoderate(?:\s+|-)suspicion\b"),
        ("high", r"\bhigh(?:\s+|-)suspicion\b|\bhighly\s+(?:suspicious|suggestive\s+of\s+malignancy)\b"),
        ("benign", r"\bbenign\b"),
        ("negative", r"\bnegative\b"),
    ]),
    subtype: terms(&[
        ("focally ectatic duct with debris", r"\b(?:focally\s+)?ectatic\s+duct\s+with\s+debris\b"),
        ("abnormal lymph node", r"\babnormal\s+lymph\s+node\b"),
        ("reactive lymph node", r"\breactive\s+lymph\s+node\b"),
        ("simple cyst", r"\bsimple\s+cyst\b"),
        ("complicated cyst", r"\bcomplicated\s+cyst\b"),
        ("cyst with debris", r"\bcyst\s+with\s+debris\b|\bdebris-filled\s+cyst\b"),
        ("sebaceous cyst", r"\bsebaceous\s+cyst\b"),
        ("fat necrosis", r"\bfat\s+necrosis\b"),
        ("lipoma", r"\blipoma\b"),
        ("cyst cluster", r"\bcyst\s+cluster\b|\bclustered\s+(?:micro)?cysts\b"),
    ]),
    next_step: terms(&[
        (
            "1 year screening mammogram",
            r"\b(?:1|one)[-\s]year\s+screening\s+mammogram\b|\bscreening\s+mammogram\s+in\s+(?:1|one)\s+year\b|\bannual\s+screening\s+mammogra(?:m|phy)\b",
        ),
        ("mri follow up", r"\bmri\s+follow[-\s]?up\b|\bfollow[-\s]?up\s+mri\b"),
        (
            "6 months follow-up",
            r"\b(?:6|six)[-\s]months?\s+follow[-\s]?up\b|\bfollow[-\s]?up(?:\s+ultrasound)?\s+in\s+(?:6|six)\s+months\b",
        ),
        (
            "12 months follow-up",
            r"\b(?:12|twelve)[-\s]months?\s+follow[-\s]?up\b|\bfollow[-\s]?up(?:\s+ultrasound)?\s+in\s+(?:12|twelve)\s+months\b",
        ),
        ("fine needle aspiration", r"\bfine[-\s]needle\s+aspiration\b|\bfna\b"),
        (
            "ultrasound guided core biopsy",
            r"\bultrasound[-\s]guided\s+core\s+(?:needle\s+)?biopsy\b|\bus[-\s]guided\s+core\s+(?:needle\s+)?biopsy\b",
        ),
        ("surgical excision", r"\bsurgical\s+excision\b"),
    ]),
});

/// Splits at `.`, `!` or `?` followed by whitespace or the end, and at
/// blank lines. Decimal points never split.
fn sentences(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let boundary = match c {
            b'.' | b'!' | b'?' => bytes.get(i + 1).is_none_or(|n| n.is_ascii_whitespace()),
            b'\n' => text[i + 1..].trim_start_matches([' ', '\t', '\r']).starts_with('\n'),
            _ => false,
        };
        if boundary {
            let piece = text[start..=i].trim();
            if !piece.is_empty() {
                out.push(piece);
            }
            start = i + 1;
        }
        i += 1;
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

fn capture<'a>(re: &Regex, text: &'a str) -> Option<&'a str> {
    re.captures(text).and_then(|c| c.get(1)).map(|m| m.as_str())
}

struct Location {
    side: Option<String>,
    clock: Option<String>,
}

fn location_of(text: &str) -> Location {
    Location {
        side: capture(&SIDE, text).map(str::to_lowercase),
        clock: capture(&CLOCK, text).map(|h| h.trim_start_matches('0').to_string()),
    }
}

fn distance_of(text: &str) -> Option<&str> {
    let cm = DISTANCE_CM.captures(text).and_then(|c| c.get(1));
    let n = DISTANCE_N.captures(text).and_then(|c| c.get(1));
    match (cm, n) {
        (Some(a), Some(b)) => Some(if a.start() <= b.start() { a } else { b }),
        (a, b) => a.or(b),
    }
    .map(|m| m.as_str())
}

/// Reads one observation sentence; `None` when it does not describe a
/// lesion.
fn lesion_from_sentence(sentence: &str) -> Option<LesionRecord> {
    if NEGATION.is_match(sentence) {
        return None;
    }
    let clause = match REFERENCE_CUE.find(sentence) {
        Some(m) => &sentence[..m.start()],
        None => sentence,
    };
    let p = &*PATTERNS;
    let location = location_of(clause);
    let distance = distance_of(clause);
    let region = first_term(clause, &p.region);
    let anchored = location.side.is_some() || location.clock.is_some() || distance.is_some() || region.is_some();
    let lesion_type = first_term(clause, &p.lesion_type);
    if !anchored || (lesion_type.is_none() && !GENERIC_CUE.is_match(clause)) {
        return None;
    }

    let mut record = LesionRecord::empty();
    let mut put = |key: AttributeKey, value: Option<&str>| {
        if let Some(v) = value {
            record.set(key, v);
        }
    };
    put(AttributeKey::SideOfBreast, location.side.as_deref());
    put(AttributeKey::ClockPosition, location.clock.as_deref());
    put(AttributeKey::DistanceFromNipple, distance);
    put(AttributeKey::AnatomicalRegion, region);
    put(AttributeKey::LesionType, lesion_type);
    put(AttributeKey::Depth, first_term(clause, &p.depth));
    put(AttributeKey::LesionShape, first_term(clause, &p.shape));
    put(AttributeKey::Orientation, first_term(clause, &p.orientation));
    put(AttributeKey::LesionMargins, first_term(clause, &p.margins));
    put(AttributeKey::Echogenicity, first_term(clause, &p.echogenicity));
    put(AttributeKey::Calcifications, first_term(clause, &p.calcifications));
    put(AttributeKey::Vascularity, first_term(clause, &p.vascularity));
    put(AttributeKey::PosteriorFeatures, first_term(clause, &p.posterior));
    Some(record)
}

/// Index of the lesion an impression sentence talks about.
fn link(lesions: &[LesionRecord], location: &Location) -> Option<usize> {
    let side = location.side.as_deref()?;
    let on_side = |r: &LesionRecord| r.get(AttributeKey::SideOfBreast) == side;
    if let Some(clock) = location.clock.as_deref() {
        let exact: Vec<usize> = (0..lesions.len())
            .filter(|&i| on_side(&lesions[i]) && lesions[i].get(AttributeKey::ClockPosition) == clock)
            .collect();
        if let [only] = exact[..] {
            return Some(only);
        }
    }
    let same_side: Vec<usize> = (0..lesions.len()).filter(|&i| on_side(&lesions[i])).collect();
    match same_side[..] {
        [only] => Some(only),
        _ => None,
    }
}

fn fill_from_impression(lesions: &mut [LesionRecord], impression: &str) {
    let p = &*PATTERNS;
    let mut target = None;
    for sentence in sentences(impression) {
        let location = location_of(sentence);
        if location.side.is_some() || location.clock.is_some() {
            target = link(lesions, &location);
        }
        let Some(i) = target else { continue };
        let record = &mut lesions[i];
        for (key, table) in [
            (AttributeKey::SuspicionOfMalignancy, &p.suspicion),
            (AttributeKey::LesionSubtype, &p.subtype),
            (AttributeKey::NextStep, &p.next_step),
        ] {
            if record.get(key) == NA {
                if let Some(value) = first_term(sentence, table) {
                    record.set(key, value);
                }
            }
        }
    }
}

/// The lesions the rules find in a report, in observation order.
pub fn rule_lesions(report: &ReportDocument) -> Vec<LesionRecord> {
    let mut lesions: Vec<LesionRecord> =
        sentences(&report.observation).into_iter().filter_map(lesion_from_sentence).collect();
    if let Some(impression) = &report.impression {
        fill_from_impression(&mut lesions, impression);
    }
    lesions
}

/// Rule extraction; the reply is always a parseable list.
pub fn extract_rules(report: &ReportDocument) -> ExtractionOutput {
    let raw = serialize_lesions(&rule_lesions(report));
    ExtractionOutput::from_reply(&report.id, RULES_BACKEND, raw, &OutputParser::default())
}

#[derive(Debug, Clone)]
pub struct RuleExtractor {
    pub workers: usize,
}

impl Default for RuleExtractor {
    fn default() -> Self {
        RuleExtractor { workers: 1 }
    }
}

impl Extractor for RuleExtractor {
    fn name(&self) -> &str {
        RULES_BACKEND
    }

    fn extract(&self, report: &ReportDocument) -> Result<ExtractionOutput, BackendError> {
        Ok(extract_rules(report))
    }

    fn max_concurrency(&self) -> usize {
        self.workers
    }
}
