//! Lesion data model: the sixteen attribute keys, their controlled
//! vocabularies, value canonicalization and the record mapping layout.
//!
//! Every value is stored in canonical form: lowercase, trimmed, single
//! spaces, and the literal `"n/a"` for absent information. Clock positions
//! are bare hour numbers and distances are unit-less decimals without
//! trailing zeros, so string equality is the matching rule everywhere.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::de::Error as _;
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};
use thiserror::Error;

/// Canonical marker for absent information.
pub const NA: &str = "n/a";

/// The sixteen lesion attributes, in canonical key order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKey {
    Depth,
    AnatomicalRegion,
    LesionType,
    LesionShape,
    Orientation,
    LesionMargins,
    Echogenicity,
    Calcifications,
    Vascularity,
    PosteriorFeatures,
    LesionSubtype,
    NextStep,
    SuspicionOfMalignancy,
    SideOfBreast,
    ClockPosition,
    DistanceFromNipple,
}

/// Where a key lives in a serialized record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldPath {
    pub parent: Option<&'static str>,
    pub field: &'static str,
}

impl fmt::Display for FieldPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.parent {
            Some(parent) => write!(f, "{parent}.{}", self.field),
            None => f.write_str(self.field),
        }
    }
}

/// Which keys take part in a record comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeySet {
    /// The ten descriptive keys `depth` .. `posterior_features`.
    Close,
    /// All sixteen keys.
    Exact,
}

const LOCATION: &str = "location";

impl AttributeKey {
    pub const ALL: [AttributeKey; 16] = [
        AttributeKey::Depth,
        AttributeKey::AnatomicalRegion,
        AttributeKey::LesionType,
        AttributeKey::LesionShape,
        AttributeKey::Orientation,
        AttributeKey::LesionMargins,
        AttributeKey::Echogenicity,
        AttributeKey::Calcifications,
        AttributeKey::Vascularity,
        AttributeKey::PosteriorFeatures,
        AttributeKey::LesionSubtype,
        AttributeKey::NextStep,
        AttributeKey::SuspicionOfMalignancy,
        AttributeKey::SideOfBreast,
        AttributeKey::ClockPosition,
        AttributeKey::DistanceFromNipple,
    ];

    /// Zero-based position in key order.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            AttributeKey::Depth => "depth",
            AttributeKey::AnatomicalRegion => "anatomical_region",
            AttributeKey::LesionType => "lesion_type",
            AttributeKey::LesionShape => "lesion_shape",
            AttributeKey::Orientation => "orientation",
            AttributeKey::LesionMargins => "lesion_margins",
            AttributeKey::Echogenicity => "echogenicity",
            AttributeKey::Calcifications => "calcifications",
            AttributeKey::Vascularity => "vascularity",
            AttributeKey::PosteriorFeatures => "posterior_features",
            AttributeKey::LesionSubtype => "lesion_subtype",
            AttributeKey::NextStep => "next_step",
            AttributeKey::SuspicionOfMalignancy => "suspicion_of_malignancy",
            AttributeKey::SideOfBreast => "side_of_breast",
            AttributeKey::ClockPosition => "clock_position",
            AttributeKey::DistanceFromNipple => "distance_from_nipple",
        }
    }

    /// Field path in the serialized record layout.
    pub fn json_path(self) -> FieldPath {
        let top = |field| FieldPath { parent: None, field };
        let loc = |field| FieldPath { parent: Some(LOCATION), field };
        match self {
            AttributeKey::LesionType => top("type"),
            AttributeKey::LesionShape => top("shape"),
            AttributeKey::LesionMargins => top("margin"),
            AttributeKey::LesionSubtype => top("subtype"),
            AttributeKey::SuspicionOfMalignancy => top("suspicion"),
            AttributeKey::SideOfBreast => loc("side_of_breast"),
            AttributeKey::ClockPosition => loc("clock_position"),
            AttributeKey::DistanceFromNipple => loc("distance_from_nipple"),
            other => top(other.name()),
        }
    }

    pub fn is_location(self) -> bool {
        self.json_path().parent.is_some()
    }

    /// Looks a key up by its name or its serialized field name.
    pub fn from_name(name: &str) -> Option<AttributeKey> {
        let name = name.trim().to_ascii_lowercase();
        AttributeKey::ALL
            .into_iter()
            .find(|k| k.name() == name || k.json_path().field == name)
    }

    pub fn vocabulary(self) -> &'static Vocabulary {
        &VOCABULARIES[self.index()]
    }
}

impl fmt::Display for AttributeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn key_set(kind: KeySet) -> &'static [AttributeKey] {
    match kind {
        KeySet::Close => &AttributeKey::ALL[..10],
        KeySet::Exact => &AttributeKey::ALL,
    }
}

/// The keys that are not location fields, in key order.
pub fn descriptive_keys() -> impl Iterator<Item = AttributeKey> {
    AttributeKey::ALL.into_iter().filter(|k| !k.is_location())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    Categorical,
    Clock,
    Numeric,
}

/// Allowed canonical values for one key. Vocabularies are open: values
/// outside the list are kept and reported as warnings.
#[derive(Debug)]
pub struct Vocabulary {
    pub key: AttributeKey,
    pub kind: ValueKind,
    pub allowed_values: &'static [&'static str],
    pub open: bool,
}

impl Vocabulary {
    /// Membership test on a canonical value. `"n/a"` is admitted for
    /// every key.
    pub fn admits(&self, value: &str) -> bool {
        if value == NA {
            return true;
        }
        match self.kind {
            ValueKind::Numeric => is_canonical_decimal(value),
            _ => self.allowed_values.contains(&value),
        }
    }

    /// Allowed values excluding `"n/a"`.
    pub fn present_values(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.allowed_values.iter().copied().filter(|v| *v != NA)
    }
}

macro_rules! vocab {
    ($key:ident, $kind:ident, [$($v:expr),* $(,)?]) => {
        Vocabulary {
            key: AttributeKey::$key,
            kind: ValueKind::$kind,
            allowed_values: &[$($v),*],
            open: true,
        }
    };
}

static VOCABULARIES: [Vocabulary; 16] = [
    vocab!(Depth, Categorical, ["posterior", "middle", "anterior", NA]),
    vocab!(
        AnatomicalRegion,
        Categorical,
        ["retroareolar", "axillary tail", "periareolar", "subareolar", "retropectoral", NA]
    ),
    vocab!(
        LesionType,
        Categorical,
        [
            "nodule",
            "cyst",
            "mass",
            "lymph node",
            "scar",
            "duct",
            "seroma",
            "post-surgical change",
            "post-biopsy",
            NA,
        ]
    ),
    vocab!(LesionShape, Categorical, ["oval", "round", "irregular", NA]),
    vocab!(Orientation, Categorical, ["parallel", "non-parallel", "other", NA]),
    vocab!(
        LesionMargins,
        Categorical,
        [
            "circumscribed",
            "obscured",
            "angular",
            "microlobulated",
            "spiculated",
            "lobulated",
            "irregular",
            "septated",
            NA,
        ]
    ),
    vocab!(
        Echogenicity,
        Categorical,
        ["anechoic", "hyperechoic", "hypoechoic", "isoechoic", "heterogeneous", "solid", NA]
    ),
    vocab!(Calcifications, Categorical, ["yes", "no", NA]),
    vocab!(Vascularity, Categorical, ["absent", "present", NA]),
    vocab!(PosteriorFeatures, Categorical, ["enhancement", "shadowing", NA]),
    vocab!(
        LesionSubtype,
        Categorical,
        [
            "abnormal lymph node",
            "simple cyst",
            "complicated cyst",
            "cyst with debris",
            "reactive lymph node",
            "fat necrosis",
            "sebaceous cyst",
            "lipoma",
            "cyst cluster",
            "focally ectatic duct with debris",
            NA,
        ]
    ),
    vocab!(
        NextStep,
        Categorical,
        [
            "1 year screening mammogram",
            "mri follow up",
            "6 months follow-up",
            "12 months follow-up",
            "fine needle aspiration",
            "ultrasound guided core biopsy",
            "surgical excision",
            NA,
        ]
    ),
    vocab!(
        SuspicionOfMalignancy,
        Categorical,
        ["low", "moderate", "high", "benign", "probably benign", "negative"]
    ),
    vocab!(SideOfBreast, Categorical, ["left", "right", NA]),
    vocab!(
        ClockPosition,
        Clock,
        ["1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "11", "12", NA]
    ),
    vocab!(DistanceFromNipple, Numeric, []),
];

/// Result of canonicalizing one raw value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Canonical {
    pub value: String,
    /// Set when a clock or distance could not be read and was replaced by
    /// `"n/a"`.
    pub unparsed: bool,
}

static DECIMAL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[0-9]+(?:\.[0-9]+)?|\.[0-9]+").unwrap());
static INTEGER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[0-9]+").unwrap());
static CANONICAL_DECIMAL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(?:0|[1-9][0-9]*)(?:\.[0-9]*[1-9])?$").unwrap());

const NULL_LIKE: &[&str] = &[
    "", "n/a", "n/a.", "na", "n.a.", "none", "null", "nil", "nan", "not applicable",
];

/// Lowercases, trims, turns underscores into spaces and collapses runs of
/// whitespace.
fn normalize_text(raw: &str) -> String {
    raw.to_lowercase()
        .replace('_', " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn is_canonical_decimal(s: &str) -> bool {
    CANONICAL_DECIMAL.is_match(s)
}

/// Canonical spelling of a decimal token such as `"01.50"` (`"1.5"`).
fn canonical_decimal(token: &str) -> String {
    let (int, frac) = token.split_once('.').unwrap_or((token, ""));
    let int = int.trim_start_matches('0');
    let int = if int.is_empty() { "0" } else { int };
    let frac = frac.trim_end_matches('0');
    if frac.is_empty() {
        int.to_string()
    } else {
        format!("{int}.{frac}")
    }
}

/// Maps a raw value to its canonical form. Total: unreadable clock
/// positions and distances become `"n/a"` with `unparsed` set.
pub fn canonicalize_value(key: AttributeKey, raw: &str) -> Canonical {
    let text = normalize_text(raw);
    if NULL_LIKE.contains(&text.as_str()) {
        return Canonical { value: NA.to_string(), unparsed: false };
    }
    let failed = || Canonical { value: NA.to_string(), unparsed: true };
    match key.vocabulary().kind {
        ValueKind::Clock => match INTEGER.find(&text).and_then(|m| m.as_str().parse::<u32>().ok()) {
            Some(hour @ 1..=12) => Canonical { value: hour.to_string(), unparsed: false },
            _ => failed(),
        },
        ValueKind::Numeric => match DECIMAL.find(&text) {
            Some(m) => Canonical { value: canonical_decimal(m.as_str()), unparsed: false },
            None => failed(),
        },
        ValueKind::Categorical => Canonical { value: text, unparsed: false },
    }
}

#[derive(Debug, Error)]
pub enum SynonymError {
    #[error("alias {alias:?} for {key} maps to both {first:?} and {second:?}")]
    Conflict { key: AttributeKey, alias: String, first: String, second: String },
    #[error("alias {alias:?} for {key} is itself the target of another alias entry")]
    Chain { key: AttributeKey, alias: String },
}

/// Canonicalization plus an optional per-key alias table applied after
/// normalization. The default normalizer has no aliases.
#[derive(Debug, Clone, Default)]
pub struct Normalizer {
    aliases: BTreeMap<AttributeKey, BTreeMap<String, String>>,
}

/// User-facing synonym table: canonical value -> aliases, per key.
pub type SynonymMap = BTreeMap<AttributeKey, BTreeMap<String, Vec<String>>>;

impl Normalizer {
    pub fn with_synonyms(map: &SynonymMap) -> Result<Self, SynonymError> {
        let mut aliases: BTreeMap<AttributeKey, BTreeMap<String, String>> = BTreeMap::new();
        for (&key, entries) in map {
            let table = aliases.entry(key).or_default();
            for (target, alias_list) in entries {
                let target = canonicalize_value(key, target).value;
                for alias in alias_list {
                    let alias = canonicalize_value(key, alias).value;
                    if alias == target {
                        continue;
                    }
                    if let Some(prev) = table.insert(alias.clone(), target.clone()) {
                        if prev != target {
                            return Err(SynonymError::Conflict {
                                key,
                                alias,
                                first: prev,
                                second: target,
                            });
                        }
                    }
                }
            }
            for target in table.values() {
                if table.contains_key(target) {
                    return Err(SynonymError::Chain { key, alias: target.clone() });
                }
            }
        }
        Ok(Normalizer { aliases })
    }

    pub fn normalize(&self, key: AttributeKey, raw: &str) -> Canonical {
        let mut canonical = canonicalize_value(key, raw);
        if let Some(target) = self.aliases.get(&key).and_then(|t| t.get(&canonical.value)) {
            canonical.value = target.clone();
        }
        canonical
    }

    pub fn is_empty(&self) -> bool {
        self.aliases.values().all(BTreeMap::is_empty)
    }
}

/// One lesion: a canonical value for each of the sixteen keys.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LesionRecord {
    values: [String; 16],
}

impl Default for LesionRecord {
    fn default() -> Self {
        Self::empty()
    }
}

impl LesionRecord {
    /// A record with every value `"n/a"`.
    pub fn empty() -> Self {
        LesionRecord { values: std::array::from_fn(|_| NA.to_string()) }
    }

    pub fn get(&self, key: AttributeKey) -> &str {
        &self.values[key.index()]
    }

    /// Stores the canonical form of `raw`. Returns `false` when the value
    /// could not be read (clock/distance) and was stored as `"n/a"`.
    pub fn set(&mut self, key: AttributeKey, raw: &str) -> bool {
        self.set_with(&Normalizer::default(), key, raw)
    }

    pub fn set_with(&mut self, normalizer: &Normalizer, key: AttributeKey, raw: &str) -> bool {
        let canonical = normalizer.normalize(key, raw);
        self.values[key.index()] = canonical.value;
        !canonical.unparsed
    }

    /// Builder form of [`LesionRecord::set`].
    pub fn with(mut self, key: AttributeKey, raw: &str) -> Self {
        self.set(key, raw);
        self
    }

    pub fn is_na(&self, key: AttributeKey) -> bool {
        self.get(key) == NA
    }

    /// Parsed distance from the nipple in centimeters.
    pub fn distance_cm(&self) -> Option<f64> {
        match self.get(AttributeKey::DistanceFromNipple) {
            NA => None,
            v => v.parse().ok(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (AttributeKey, &str)> {
        AttributeKey::ALL.into_iter().map(move |k| (k, self.get(k)))
    }

    /// Builds a record from a serialized mapping. Known fields are matched
    /// by serialized name or key name (case-insensitive), location fields
    /// are read from the nested `location` object or from the top level,
    /// missing fields become `"n/a"` and unknown fields are dropped with a
    /// warning.
    pub fn from_mapping(
        value: &Value,
        normalizer: &Normalizer,
    ) -> Result<(LesionRecord, Vec<String>), RecordError> {
        let Value::Object(map) = value else {
            return Err(RecordError::NotAnObject(json_type(value)));
        };
        let mut record = LesionRecord::empty();
        let mut warnings = Vec::new();
        for (name, field) in map {
            if name.trim().eq_ignore_ascii_case(LOCATION) {
                match field {
                    Value::Object(loc) => {
                        for (sub, inner) in loc {
                            match AttributeKey::from_name(sub).filter(|k| k.is_location()) {
                                Some(key) => {
                                    record.assign(normalizer, key, inner, &mut warnings)
                                }
                                None => warnings.push(format!("unknown field location.{sub} dropped")),
                            }
                        }
                    }
                    Value::Null => {}
                    other => warnings.push(format!(
                        "location is {}, expected an object; dropped",
                        json_type(other)
                    )),
                }
                continue;
            }
            match AttributeKey::from_name(name) {
                Some(key) => record.assign(normalizer, key, field, &mut warnings),
                None => warnings.push(format!("unknown field {name} dropped")),
            }
        }
        Ok((record, warnings))
    }

    fn assign(
        &mut self,
        normalizer: &Normalizer,
        key: AttributeKey,
        field: &Value,
        warnings: &mut Vec<String>,
    ) {
        let raw = match field {
            Value::String(s) => s.clone(),
            Value::Number(n) => n.to_string(),
            Value::Null => NA.to_string(),
            Value::Bool(true) => "yes".to_string(),
            Value::Bool(false) => "no".to_string(),
            other => {
                warnings.push(format!("{key}: {} value replaced by n/a", json_type(other)));
                NA.to_string()
            }
        };
        if !self.set_with(normalizer, key, &raw) {
            warnings.push(format!("{key}: unreadable value {raw:?} replaced by n/a"));
        }
    }

    /// The record in its serialized layout.
    pub fn to_mapping(&self) -> Value {
        let mut location = Map::new();
        let mut top = Map::new();
        for (key, value) in self.iter() {
            let path = key.json_path();
            let target = if path.parent.is_some() { &mut location } else { &mut top };
            target.insert(path.field.to_string(), Value::String(value.to_string()));
        }
        top.insert(LOCATION.to_string(), Value::Object(location));
        Value::Object(top)
    }
}

impl std::ops::Index<AttributeKey> for LesionRecord {
    type Output = str;

    fn index(&self, key: AttributeKey) -> &str {
        self.get(key)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecordError {
    #[error("expected a record object, found {0}")]
    NotAnObject(&'static str),
}

fn json_type(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

struct LocationFields<'a>(&'a LesionRecord);

impl Serialize for LocationFields<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(3))?;
        for key in AttributeKey::ALL.into_iter().filter(|k| k.is_location()) {
            map.serialize_entry(key.json_path().field, self.0.get(key))?;
        }
        map.end()
    }
}

// Field order follows the labeling layout: location first, then the
// descriptive keys in the order the prompt lists them.
const SERIALIZED_ORDER: [AttributeKey; 13] = [
    AttributeKey::Depth,
    AttributeKey::AnatomicalRegion,
    AttributeKey::LesionType,
    AttributeKey::LesionShape,
    AttributeKey::Orientation,
    AttributeKey::LesionMargins,
    AttributeKey::Echogenicity,
    AttributeKey::Calcifications,
    AttributeKey::Vascularity,
    AttributeKey::PosteriorFeatures,
    AttributeKey::SuspicionOfMalignancy,
    AttributeKey::LesionSubtype,
    AttributeKey::NextStep,
];

impl Serialize for LesionRecord {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(14))?;
        map.serialize_entry(LOCATION, &LocationFields(self))?;
        for key in SERIALIZED_ORDER {
            map.serialize_entry(key.json_path().field, self.get(key))?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for LesionRecord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        LesionRecord::from_mapping(&value, &Normalizer::default())
            .map(|(record, _)| record)
            .map_err(D::Error::custom)
    }
}

/// An out-of-vocabulary value found by [`validate_record`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularyWarning {
    pub key: AttributeKey,
    pub value: String,
}

impl fmt::Display for VocabularyWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "out-of-vocabulary {}: {:?}", self.key, self.value)
    }
}

/// One warning per value outside its vocabulary; empty iff the record is
/// fully in-vocabulary.
pub fn validate_record(record: &LesionRecord) -> Vec<VocabularyWarning> {
    record
        .iter()
        .filter(|(key, value)| !key.vocabulary().admits(value))
        .map(|(key, value)| VocabularyWarning { key, value: value.to_string() })
        .collect()
}

/// A breast ultrasound report with its isolated sections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub id: String,
    #[serde(default)]
    pub raw_text: String,
    pub observation: String,
    #[serde(default)]
    pub impression: Option<String>,
}

impl ReportDocument {
    /// A document whose sections are already isolated.
    pub fn from_sections(
        id: impl Into<String>,
        observation: impl Into<String>,
        impression: Option<String>,
    ) -> Self {
        let observation = observation.into();
        let raw_text = match &impression {
            Some(imp) => format!("Observation:\n{observation}\n\nImpression:\n{imp}\n"),
            None => format!("Observation:\n{observation}\n"),
        };
        ReportDocument { id: id.into(), raw_text, observation, impression }
    }
}
