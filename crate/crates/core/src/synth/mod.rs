//! Synthetic report corpora with known ground truth, and controlled
//! corruption of prediction lists.
//!
//! Every report draws from its own random stream derived from the corpus
//! seed and the report index, so output does not depend on how generation
//! is split across threads.

mod mutate;
mod render;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{AttributeKey, LesionRecord, ReportDocument, ValueKind, NA};

pub use mutate::{corrupt, replay_ledger, Mutation, MutationSpec, ReplayError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplateFamily {
    /// Fixed phrasing the rule extractor recovers exactly.
    A,
    /// Varied phrasing (synonyms, shorthand, reordering); no recovery
    /// guarantee.
    B,
}

impl std::str::FromStr for TemplateFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(TemplateFamily::A),
            "B" | "b" => Ok(TemplateFamily::B),
            other => Err(format!("unknown template family {other:?} (expected A or B)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_reports: usize,
    /// (lesion count, probability) pairs.
    pub lesions_per_report: Vec<(usize, f64)>,
    /// Probability that a key is not mentioned (labeled `"n/a"`).
    pub na_rate_per_key: BTreeMap<AttributeKey, f64>,
    pub template_family: TemplateFamily,
}

/// Default omission rates: 0.1 for the location keys and the lesion type,
/// 0.6 for everything else.
pub fn default_na_rates() -> BTreeMap<AttributeKey, f64> {
    AttributeKey::ALL
        .into_iter()
        .map(|k| {
            let rate = if k.is_location() || k == AttributeKey::LesionType { 0.1 } else { 0.6 };
            (k, rate)
        })
        .collect()
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_reports: 100,
            lesions_per_report: vec![(1, 0.6), (2, 0.3), (3, 0.1)],
            na_rate_per_key: default_na_rates(),
            template_family: TemplateFamily::A,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(String),
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let invalid = |m: String| Err(SynthError::InvalidConfig(m));
        if self.lesions_per_report.is_empty() {
            return invalid("lesions_per_report is empty".into());
        }
        if let Some((n, p)) = self.lesions_per_report.iter().find(|(_, p)| !(0.0..=1.0).contains(p)) {
            return invalid(format!("probability {p} for {n} lesions is outside [0, 1]"));
        }
        let total: f64 = self.lesions_per_report.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 {
            return invalid(format!("lesion count probabilities sum to {total}, not 1"));
        }
        if let Some((k, r)) = self.na_rate_per_key.iter().find(|(_, r)| !(0.0..=1.0).contains(*r)) {
            return invalid(format!("n/a rate {r} for {k} is outside [0, 1]"));
        }
        if self.template_family == TemplateFamily::A {
            if let Some(&(n, _)) = self.lesions_per_report.iter().find(|(n, p)| *n > 24 && *p > 0.0) {
                return invalid(format!("{n} lesions cannot get distinct locations in family A"));
            }
        }
        Ok(())
    }

    fn na_rate(&self, key: AttributeKey) -> f64 {
        self.na_rate_per_key.get(&key).copied().unwrap_or(0.0)
    }
}

/// A generated report and its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthReport {
    pub document: ReportDocument,
    pub truth: Vec<LesionRecord>,
}

pub(crate) fn report_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn sample_count(rng: &mut ChaCha8Rng, dist: &[(usize, f64)]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(n, p) in dist {
        acc += p;
        if u < acc {
            return n;
        }
    }
    dist.iter().rev().find(|(_, p)| *p > 0.0).map_or(0, |(n, _)| *n)
}

fn sample_value(rng: &mut ChaCha8Rng, key: AttributeKey) -> String {
    match key.vocabulary().kind {
        ValueKind::Clock => rng.random_range(1..=12u32).to_string(),
        ValueKind::Numeric => {
            let halves = rng.random_range(1..=24u32);
            if halves % 2 == 0 {
                (halves / 2).to_string()
            } else {
                format!("{}.5", halves / 2)
            }
        }
        ValueKind::Categorical => {
            let values: Vec<&str> = key.vocabulary().present_values().collect();
            values[rng.random_range(0..values.len())].to_string()
        }
    }
}

fn sample_lesion(rng: &mut ChaCha8Rng, config: &SynthConfig) -> LesionRecord {
    let mut record = LesionRecord::empty();
    for key in AttributeKey::ALL {
        let omitted = rng.random::<f64>() < config.na_rate(key);
        if !omitted {
            record.set(key, &sample_value(rng, key));
        }
    }
    record
}

const IMPRESSION_KEYS: [AttributeKey; 3] = [
    AttributeKey::SuspicionOfMalignancy,
    AttributeKey::LesionSubtype,
    AttributeKey::NextStep,
];

fn has_impression_content(record: &LesionRecord) -> bool {
    IMPRESSION_KEYS.iter().any(|&k| !record.is_na(k))
}

/// Adjusts family-A truth so the phrasing stays machine-recoverable: every
/// lesion has a location anchor, lesions with impression content have a
/// side and a clock, and no two lesions share a (side, clock) pair.
fn make_recoverable(rng: &mut ChaCha8Rng, lesions: &mut [LesionRecord]) {
    let mut taken: Vec<(String, String)> = Vec::new();
    for record in lesions.iter_mut() {
        let anchored = [
            AttributeKey::SideOfBreast,
            AttributeKey::ClockPosition,
            AttributeKey::DistanceFromNipple,
            AttributeKey::AnatomicalRegion,
        ]
        .iter()
        .any(|&k| !record.is_na(k));
        if !anchored || (has_impression_content(record) && record.is_na(AttributeKey::SideOfBreast)) {
            record.set(AttributeKey::SideOfBreast, &sample_value(rng, AttributeKey::SideOfBreast));
        }
        if has_impression_content(record) && record.is_na(AttributeKey::ClockPosition) {
            record.set(AttributeKey::ClockPosition, &sample_value(rng, AttributeKey::ClockPosition));
        }
        if record.is_na(AttributeKey::SideOfBreast) || record.is_na(AttributeKey::ClockPosition) {
            continue;
        }
        let side = record.get(AttributeKey::SideOfBreast).to_string();
        let is_taken = |clock: &str| taken.iter().any(|(s, c)| *s == side && c == clock);
        if is_taken(record.get(AttributeKey::ClockPosition)) {
            let free: Vec<String> = (1..=12u32).map(|h| h.to_string()).filter(|c| !is_taken(c)).collect();
            match free.is_empty() {
                false => {
                    let pick = free[rng.random_range(0..free.len())].clone();
                    record.set(AttributeKey::ClockPosition, &pick);
                }
                true => {
                    record.set(AttributeKey::ClockPosition, NA);
                    for key in IMPRESSION_KEYS {
                        record.set(key, NA);
                    }
                    continue;
                }
            }
        }
        taken.push((side, record.get(AttributeKey::ClockPosition).to_string()));
    }
}

pub fn report_id(seed: u64, index: usize) -> String {
    format!("synth-{seed}-{index:05}")
}

/// Generates report `index` of the corpus described by `config`.
pub fn generate_report(config: &SynthConfig, index: usize) -> SynthReport {
    let mut rng = report_rng(config.seed, index);
    let count = sample_count(&mut rng, &config.lesions_per_report);
    let mut truth: Vec<LesionRecord> = (0..count).map(|_| sample_lesion(&mut rng, config)).collect();
    if config.template_family == TemplateFamily::A {
        make_recoverable(&mut rng, &mut truth);
    }
    let id = report_id(config.seed, index);
    let (observation, impression) = match config.template_family {
        TemplateFamily::A => render::family_a(&mut rng, &truth),
        TemplateFamily::B => render::family_b(&mut rng, &truth),
    };
    let document = render::document(&id, observation, impression);
    SynthReport { document, truth }
}

pub fn generate_corpus(config: &SynthConfig) -> Result<Vec<SynthReport>, SynthError> {
    config.validate()?;
    Ok((0..config.n_reports).map(|i| generate_report(config, i)).collect())
}

/// Same output as [`generate_corpus`], generated on `workers` threads.
pub fn generate_corpus_parallel(config: &SynthConfig, workers: usize) -> Result<Vec<SynthReport>, SynthError> {
    config.validate()?;
    let workers = workers.max(1);
    let chunk = config.n_reports.div_ceil(workers).max(1);
    let indices: Vec<usize> = (0..config.n_reports).collect();
    Ok(std::thread::scope(|scope| {
        let handles: Vec<_> = indices
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|&i| generate_report(config, i)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("generator worker panicked")).collect()
    }))
}
