//! Instruction-tuning records and train/validation/test splits.
//!
//! Dataset files hold one `{id, instruction, input, output}` object per
//! line; that layout is the contract with the training scripts.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::ExtractionOutput;
use crate::output_normalizer::serialize_lesions;
use crate::prompt_builder::{finetune_input, finetune_instruction, FewShotExample, FINETUNE_INSTRUCTION_VERSION};
use crate::schema::ReportDocument;
use crate::synth::{generate_corpus, SynthConfig, TemplateFamily};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub instruction: String,
    pub input: String,
    /// The label: a compact JSON list of lesion records.
    pub output: String,
}

/// Where the labels came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Llm,
    Rules,
}

impl std::str::FromStr for LabelSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "llm" => Ok(LabelSource::Llm),
            "rules" => Ok(LabelSource::Rules),
            other => Err(format!("unknown label source {other:?} (expected llm or rules)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum LabelError {
    #[error("report {id} has no label")]
    MissingLabel { id: String },
    #[error("label for report {id} is not a list of records")]
    UnjsonableLabel { id: String },
}

/// Provenance written next to a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub instruction_version: String,
    pub label_source: LabelSource,
    /// Backend names seen on the labels, with counts.
    pub label_backends: BTreeMap<String, usize>,
    pub records: usize,
    pub skipped: Vec<LabelError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltDataset {
    pub records: Vec<DatasetRecord>,
    pub manifest: DatasetManifest,
}

/// Pairs every report with its label. Reports without a label, or whose
/// label did not parse, are skipped and listed in the manifest. When a
/// report has several labels the last one wins.
pub fn build_dataset(reports: &[ReportDocument], labels: &[ExtractionOutput], source: LabelSource) -> BuiltDataset {
    let by_id: BTreeMap<&str, &ExtractionOutput> = labels.iter().map(|l| (l.report_id.as_str(), l)).collect();
    let instruction = finetune_instruction().to_string();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut label_backends = BTreeMap::new();
    for report in reports {
        let Some(label) = by_id.get(report.id.as_str()) else {
            skipped.push(LabelError::MissingLabel { id: report.id.clone() });
            continue;
        };
        let Some(lesions) = &label.parsed else {
            skipped.push(LabelError::UnjsonableLabel { id: report.id.clone() });
            continue;
        };
        *label_backends.entry(label.backend_name.clone()).or_insert(0) += 1;
        records.push(DatasetRecord {
            id: report.id.clone(),
            instruction: instruction.clone(),
            input: finetune_input(report),
            output: serialize_lesions(lesions),
        });
    }
    let manifest = DatasetManifest {
        instruction_version: FINETUNE_INSTRUCTION_VERSION.to_string(),
        label_source: source,
        label_backends,
        records: records.len(),
        skipped,
    };
    BuiltDataset { records, manifest }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.90, validation: 0.07, test: 0.03 }
    }
}

impl std::str::FromStr for SplitRatios {
    type Err = String;

    /// Parses `"0.9,0.07,0.03"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad ratio {p:?}: {e}")))
            .collect::<Result<_, _>>()?;
        match parts[..] {
            [train, validation, test] => Ok(SplitRatios { train, validation, test }),
            _ => Err(format!("expected three comma-separated ratios, got {}", parts.len())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplitError {
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("id {0} appears more than once")]
    DuplicateId(String),
}

/// Keeps the floor from losing a record to products that land just under
/// an integer, such as 0.29 * 100 = 28.999999999999996.
const FLOOR_GUARD: f64 = 1e-9;

fn part_size(n: usize, ratio: f64) -> usize {
    (n as f64 * ratio + FLOOR_GUARD).floor() as usize
}

/// Shuffles `ids` with `seed` and cuts validation and test sizes by floor;
/// the remainder goes to train.
pub fn split(ids: &[String], ratios: SplitRatios, seed: u64) -> Result<CorpusSplit, SplitError> {
    let r = [ratios.train, ratios.validation, ratios.test];
    if r.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(SplitError::InvalidRatios(format!("ratios must be positive, got {r:?}")));
    }
    let total: f64 = r.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(SplitError::InvalidRatios(format!("ratios sum to {total}, not 1")));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(SplitError::DuplicateId(dup.clone()));
    }

    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = shuffled.len();
    let n_val = part_size(n, ratios.validation);
    let n_test = part_size(n, ratios.test).min(n - n_val);
    let n_train = n - n_val - n_test;
    let test = shuffled.split_off(n_train + n_val);
    let validation = shuffled.split_off(n_train);
    Ok(CorpusSplit { seed, ratios, train: shuffled, validation, test })
}

/// Few-shot stand-ins drawn from the synthetic generator, for use when no
/// curated examples are available.
pub fn synthetic_examples(n: usize, seed: u64) -> Vec<FewShotExample> {
    let config = SynthConfig {
        seed,
        n_reports: n,
        lesions_per_report: vec![(1, 0.5), (2, 0.5)],
        template_family: TemplateFamily::A,
        ..SynthConfig::default()
    };
    generate_corpus(&config)
        .expect("built-in config is valid")
        .into_iter()
        .map(|r| FewShotExample {
            observation: r.document.observation,
            impression: r.document.impression.unwrap_or_default(),
            expected_output: r.truth,
        })
        .collect()
}
