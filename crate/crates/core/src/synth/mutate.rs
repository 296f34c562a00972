//! Controlled corruption of prediction lists, with a ledger of every
//! change so the corrupted set can be rebuilt from the clean one.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::report_rng;
use crate::backends::ExtractionOutput;
use crate::output_normalizer::serialize_lesions;
use crate::schema::{AttributeKey, LesionRecord, NA};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MutationSpec {
    pub drop_lesion_rate: f64,
    pub swap_attribute_rate: f64,
    pub na_out_rate: f64,
    pub seed: u64,
}

impl Default for MutationSpec {
    fn default() -> Self {
        MutationSpec { drop_lesion_rate: 0.1, swap_attribute_rate: 0.1, na_out_rate: 0.05, seed: 0 }
    }
}

/// One applied change. Indices refer to the lesion list as it was when the
/// change was made; drops of one report are listed from the highest index
/// down, so replaying in ledger order needs no index adjustment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mutation {
    DropLesion { report_id: String, lesion_index: usize, lesion: Box<LesionRecord> },
    /// Exchange of `key` between two lesions. `old` and `new` are the
    /// values at `lesion_index` before and after.
    SwapAttribute {
        report_id: String,
        lesion_index: usize,
        other_index: usize,
        key: AttributeKey,
        old: String,
        new: String,
    },
    NaOut { report_id: String, lesion_index: usize, key: AttributeKey, old: String },
}

impl Mutation {
    pub fn report_id(&self) -> &str {
        match self {
            Mutation::DropLesion { report_id, .. }
            | Mutation::SwapAttribute { report_id, .. }
            | Mutation::NaOut { report_id, .. } => report_id,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("ledger refers to unknown report {0}")]
    UnknownReport(String),
    #[error("ledger refers to report {0}, which has no parsed lesions")]
    Unparsed(String),
    #[error("ledger entry does not match report {report_id}: {detail}")]
    Mismatch { report_id: String, detail: String },
}

fn mutate_one(
    rng: &mut impl Rng,
    spec: &MutationSpec,
    report_id: &str,
    lesions: &mut Vec<LesionRecord>,
    ledger: &mut Vec<Mutation>,
) {
    let dropped: Vec<bool> = (0..lesions.len()).map(|_| rng.random::<f64>() < spec.drop_lesion_rate).collect();
    for i in (0..lesions.len()).rev().filter(|&i| dropped[i]) {
        let lesion = lesions.remove(i);
        ledger.push(Mutation::DropLesion { report_id: report_id.to_string(), lesion_index: i, lesion: Box::new(lesion) });
    }

    if lesions.len() >= 2 && rng.random::<f64>() < spec.swap_attribute_rate {
        let i = rng.random_range(0..lesions.len());
        let j = (i + rng.random_range(1..lesions.len())) % lesions.len();
        let key = AttributeKey::ALL[rng.random_range(0..AttributeKey::ALL.len())];
        let old = lesions[i].get(key).to_string();
        let new = lesions[j].get(key).to_string();
        lesions[i].set(key, &new);
        lesions[j].set(key, &old);
        ledger.push(Mutation::SwapAttribute {
            report_id: report_id.to_string(),
            lesion_index: i,
            other_index: j,
            key,
            old,
            new,
        });
    }

    for (i, lesion) in lesions.iter_mut().enumerate() {
        for key in AttributeKey::ALL {
            if !lesion.is_na(key) && rng.random::<f64>() < spec.na_out_rate {
                let old = lesion.get(key).to_string();
                lesion.set(key, NA);
                ledger.push(Mutation::NaOut { report_id: report_id.to_string(), lesion_index: i, key, old });
            }
        }
    }
}

fn with_lesions(base: &ExtractionOutput, lesions: Vec<LesionRecord>) -> ExtractionOutput {
    let mut out = base.clone();
    out.raw_text = serialize_lesions(&lesions);
    out.parsed = Some(lesions);
    out
}

/// Drops lesions, swaps attributes between lesions of the same report and
/// blanks values, each at its configured rate. Predictions without parsed
/// lesions pass through unchanged. Report `i` uses its own random stream.
pub fn corrupt(predictions: &[ExtractionOutput], spec: &MutationSpec) -> (Vec<ExtractionOutput>, Vec<Mutation>) {
    let mut ledger = Vec::new();
    let mutated = predictions
        .iter()
        .enumerate()
        .map(|(index, prediction)| match &prediction.parsed {
            None => prediction.clone(),
            Some(original) => {
                let mut rng = report_rng(spec.seed, index);
                let mut lesions = original.clone();
                mutate_one(&mut rng, spec, &prediction.report_id, &mut lesions, &mut ledger);
                match &lesions == original {
                    true => prediction.clone(),
                    false => with_lesions(prediction, lesions),
                }
            }
        })
        .collect();
    (mutated, ledger)
}

/// Applies `ledger` to `clean`, checking every recorded old value.
pub fn replay_ledger(clean: &[ExtractionOutput], ledger: &[Mutation]) -> Result<Vec<ExtractionOutput>, ReplayError> {
    let mut out: Vec<ExtractionOutput> = clean.to_vec();
    for entry in ledger {
        let id = entry.report_id();
        let target = out
            .iter_mut()
            .find(|o| o.report_id == id)
            .ok_or_else(|| ReplayError::UnknownReport(id.to_string()))?;
        let lesions = target.parsed.as_mut().ok_or_else(|| ReplayError::Unparsed(id.to_string()))?;
        let mismatch = |detail: String| ReplayError::Mismatch { report_id: id.to_string(), detail };
        let check = |lesions: &Vec<LesionRecord>, i: usize| {
            if i < lesions.len() {
                Ok(())
            } else {
                Err(mismatch(format!("lesion {i} out of range")))
            }
        };
        match entry {
            Mutation::DropLesion { lesion_index, lesion, .. } => {
                check(lesions, *lesion_index)?;
                if &lesions[*lesion_index] != lesion.as_ref() {
                    return Err(mismatch(format!("lesion {lesion_index} differs from the dropped record")));
                }
                lesions.remove(*lesion_index);
            }
            Mutation::SwapAttribute { lesion_index, other_index, key, old, new, .. } => {
                check(lesions, *lesion_index)?;
                check(lesions, *other_index)?;
                if lesions[*lesion_index].get(*key) != old || lesions[*other_index].get(*key) != new {
                    return Err(mismatch(format!("{key} values differ from the ledger")));
                }
                lesions[*lesion_index].set(*key, new);
                lesions[*other_index].set(*key, old);
            }
            Mutation::NaOut { lesion_index, key, old, .. } => {
                check(lesions, *lesion_index)?;
                if lesions[*lesion_index].get(*key) != old {
                    return Err(mismatch(format!("{key} of lesion {lesion_index} is not {old}")));
                }
                lesions[*lesion_index].set(*key, NA);
            }
        }
    }
    for o in out.iter_mut() {
        if let Some(lesions) = &o.parsed {
            if clean.iter().any(|c| c.report_id == o.report_id && c.parsed.as_ref() != Some(lesions)) {
                o.raw_text = serialize_lesions(lesions);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::extract_rules;
    use crate::synth::{generate_corpus, SynthConfig};

    fn clean(n: usize) -> Vec<ExtractionOutput> {
        let config = SynthConfig { seed: 2, n_reports: n, ..SynthConfig::default() };
        generate_corpus(&config).unwrap().iter().map(|r| extract_rules(&r.document)).collect()
    }

    #[test]
    fn zero_rates_are_identity() {
        let base = clean(30);
        let spec = MutationSpec { drop_lesion_rate: 0.0, swap_attribute_rate: 0.0, na_out_rate: 0.0, seed: 1 };
        let (out, ledger) = corrupt(&base, &spec);
        assert_eq!(out, base);
        assert!(ledger.is_empty());
    }

    #[test]
    fn full_drop_empties_every_report() {
        let base = clean(30);
        let spec = MutationSpec { drop_lesion_rate: 1.0, swap_attribute_rate: 0.0, na_out_rate: 0.0, seed: 1 };
        let (out, ledger) = corrupt(&base, &spec);
        assert!(out.iter().all(|o| o.parsed.as_deref() == Some(&[][..]) && o.raw_text == "[]"));
        let total: usize = base.iter().map(|o| o.parsed.as_ref().unwrap().len()).sum();
        assert_eq!(ledger.len(), total);
        assert!(ledger.iter().all(|m| matches!(m, Mutation::DropLesion { .. })));
    }

    #[test]
    fn replay_reproduces_corruption() {
        let base = clean(60);
        for seed in 0..5 {
            let spec = MutationSpec { drop_lesion_rate: 0.3, swap_attribute_rate: 0.5, na_out_rate: 0.2, seed };
            let (out, ledger) = corrupt(&base, &spec);
            assert!(!ledger.is_empty());
            assert_eq!(replay_ledger(&base, &ledger).unwrap(), out);
        }
    }

    #[test]
    fn replay_detects_foreign_ledgers() {
        let base = clean(10);
        let spec = MutationSpec { drop_lesion_rate: 1.0, swap_attribute_rate: 0.0, na_out_rate: 0.0, seed: 0 };
        let (out, ledger) = corrupt(&base, &spec);
        assert!(replay_ledger(&out, &ledger).is_err());
        let bogus = vec![Mutation::NaOut { report_id: "nope".into(), lesion_index: 0, key: AttributeKey::Depth, old: "x".into() }];
        assert_eq!(replay_ledger(&base, &bogus), Err(ReplayError::UnknownReport("nope".into())));
    }

    #[test]
    fn ledger_serializes() {
        let base = clean(20);
        let spec = MutationSpec { drop_lesion_rate: 0.3, swap_attribute_rate: 0.5, na_out_rate: 0.2, seed: 4 };
        let (_, ledger) = corrupt(&base, &spec);
        let json = serde_json::to_string(&ledger).unwrap();
        let back: Vec<Mutation> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ledger);
    }
}
