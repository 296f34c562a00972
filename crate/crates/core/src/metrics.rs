//! Corpus evaluation: JSONable, exact-match (EM) and close-domain-match
//! (CDM) accuracies, plus per-key recall, precision and F1.
//!
//! Lesion lists are put in a deterministic total order before positional
//! comparison. Per-key scores compare the left, right and n/a side groups
//! separately, up to the shorter list of each group. Predictions that are
//! not valid lists count as empty lists.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backends::ExtractionOutput;
use crate::schema::{descriptive_keys, key_set, validate_record, AttributeKey, KeySet, LesionRecord, NA};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub report_id: String,
    pub prediction: ExtractionOutput,
    pub truth: Vec<LesionRecord>,
}

impl EvalPair {
    fn predicted(&self) -> &[LesionRecord] {
        self.prediction.parsed.as_deref().unwrap_or(&[])
    }
}

fn side_rank(side: &str) -> u8 {
    match side {
        "left" => 0,
        "right" => 1,
        NA => 3,
        _ => 2,
    }
}

fn compare_missing_last<T, F: Fn(&T, &T) -> Ordering>(a: Option<T>, b: Option<T>, cmp: F) -> Ordering {
    match (a, b) {
        (Some(a), Some(b)) => cmp(&a, &b),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
}

/// The lesion order: side (left, right, other, n/a), clock ascending,
/// distance ascending (missing values last), then the remaining keys
/// lexicographically in key order.
pub fn lesion_order(a: &LesionRecord, b: &LesionRecord) -> Ordering {
    let side = |r: &LesionRecord| r.get(AttributeKey::SideOfBreast).to_string();
    let clock = |r: &LesionRecord| r.get(AttributeKey::ClockPosition).parse::<u32>().ok();
    let distance = |r: &LesionRecord| r.distance_cm();
    side_rank(&side(a))
        .cmp(&side_rank(&side(b)))
        .then_with(|| side(a).cmp(&side(b)))
        .then_with(|| compare_missing_last(clock(a), clock(b), u32::cmp))
        .then_with(|| compare_missing_last(distance(a), distance(b), f64::total_cmp))
        .then_with(|| {
            AttributeKey::ALL
                .iter()
                .filter(|k| k.is_location())
                .map(|&k| a.get(k).cmp(b.get(k)))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then_with(|| {
            descriptive_keys()
                .map(|k| a.get(k).cmp(b.get(k)))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

pub fn sort_lesions(records: &[LesionRecord]) -> Vec<LesionRecord> {
    let mut sorted = records.to_vec();
    sorted.sort_by(lesion_order);
    sorted
}

pub fn len_match(pred: &[LesionRecord], truth: &[LesionRecord]) -> bool {
    pred.len() == truth.len()
}

fn keys_match(pred: &[LesionRecord], truth: &[LesionRecord], keys: &[AttributeKey]) -> bool {
    len_match(pred, truth)
        && pred
            .iter()
            .zip(truth)
            .all(|(p, t)| keys.iter().all(|&k| p.get(k) == t.get(k)))
}

/// Length match and equality on the ten close-domain keys. Both lists must
/// already be sorted with [`sort_lesions`].
pub fn cdm_match(pred: &[LesionRecord], truth: &[LesionRecord]) -> bool {
    keys_match(pred, truth, key_set(KeySet::Close))
}

/// Length match and equality on all sixteen keys. Both lists must already
/// be sorted with [`sort_lesions`].
pub fn em_match(pred: &[LesionRecord], truth: &[LesionRecord]) -> bool {
    keys_match(pred, truth, key_set(KeySet::Exact))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SideGroups {
    pub left: Vec<LesionRecord>,
    pub right: Vec<LesionRecord>,
    pub na: Vec<LesionRecord>,
}

impl SideGroups {
    pub fn groups(&self) -> [&[LesionRecord]; 3] {
        [&self.left, &self.right, &self.na]
    }
}

/// Partitions a sorted list by side, preserving order. Sides other than
/// left and right go to the n/a group.
pub fn split_by_side(records: &[LesionRecord]) -> SideGroups {
    let mut groups = SideGroups::default();
    for record in records {
        let target = match record.get(AttributeKey::SideOfBreast) {
            "left" => &mut groups.left,
            "right" => &mut groups.right,
            _ => &mut groups.na,
        };
        target.push(record.clone());
    }
    groups
}

/// Positional matches on `key` over the first `min(|pred|, |truth|)`
/// lesions. `"n/a" == "n/a"` counts as a match.
pub fn count_match(pred_side: &[LesionRecord], truth_side: &[LesionRecord], key: AttributeKey) -> u64 {
    pred_side
        .iter()
        .zip(truth_side)
        .filter(|(p, t)| p.get(key) == t.get(key))
        .count() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degeneracy {
    /// No reports: accuracies reported as 0.
    EmptyCorpus,
    /// No ground-truth lesions: recall reported as 0.
    NoTruthLesions,
    /// No predicted lesions: precision reported as 0.
    NoPredictedLesions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyScore {
    /// Shared numerator of recall and precision.
    pub matches: u64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub reports: u64,
    pub jsonable: u64,
    pub exact_matches: u64,
    pub close_matches: u64,
    pub truth_lesions: u64,
    pub predicted_lesions: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub jsonable_acc: f64,
    pub em_acc: f64,
    pub cdm_acc: f64,
    pub per_key: BTreeMap<AttributeKey, KeyScore>,
    pub counts: EvalCounts,
    pub flags: Vec<Degeneracy>,
    /// Out-of-vocabulary values in the predictions. They do not affect
    /// matching.
    pub vocabulary_warnings: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyAverage {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl EvalSummary {
    /// Unweighted mean over the sixteen keys.
    pub fn average(&self) -> KeyAverage {
        let n = self.per_key.len().max(1) as f64;
        let sum = |f: fn(&KeyScore) -> f64| self.per_key.values().map(f).sum::<f64>() / n;
        KeyAverage { recall: sum(|s| s.recall), precision: sum(|s| s.precision), f1: sum(|s| s.f1) }
    }

    /// Plain-text report: per-key table with an average row, then the
    /// report-level accuracies.
    pub fn render_report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<26}{:>10}{:>10}{:>10}", "key", "recall", "precision", "f1");
        for (key, score) in &self.per_key {
            let _ = writeln!(
                out,
                "{:<26}{:>10.3}{:>10.3}{:>10.3}",
                key.name().replace('_', " "),
                score.recall,
                score.precision,
                score.f1
            );
        }
        let avg = self.average();
        let _ = writeln!(out, "{:<26}{:>10.3}{:>10.3}{:>10.3}", "Average", avg.recall, avg.precision, avg.f1);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<26}{:>10.3}", "JSONable", self.jsonable_acc);
        let _ = writeln!(out, "{:<26}{:>10.3}", "EM", self.em_acc);
        let _ = writeln!(out, "{:<26}{:>10.3}", "CDM", self.cdm_acc);
        let _ = writeln!(out);
        let c = &self.counts;
        let _ = writeln!(
            out,
            "reports {}  truth lesions {}  predicted lesions {}  vocabulary warnings {}",
            c.reports, c.truth_lesions, c.predicted_lesions, self.vocabulary_warnings
        );
        for flag in &self.flags {
            let _ = writeln!(out, "flag: {}", serde_json::to_value(flag).unwrap().as_str().unwrap_or(""));
        }
        out
    }
}

/// Additive evaluation state. Tallies over disjoint shards merge into the
/// tally of their union, so sharded evaluation is bit-identical to
/// sequential evaluation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvalTally {
    pub counts: EvalCounts,
    pub matches: [u64; 16],
    pub vocabulary_warnings: u64,
}

impl EvalTally {
    pub fn add(&mut self, pair: &EvalPair) {
        let pred = sort_lesions(pair.predicted());
        let truth = sort_lesions(&pair.truth);
        let c = &mut self.counts;
        c.reports += 1;
        c.jsonable += u64::from(pair.prediction.parsed.is_some());
        c.exact_matches += u64::from(em_match(&pred, &truth));
        c.close_matches += u64::from(cdm_match(&pred, &truth));
        c.truth_lesions += truth.len() as u64;
        c.predicted_lesions += pred.len() as u64;

        let pred_groups = split_by_side(&pred);
        let truth_groups = split_by_side(&truth);
        for key in AttributeKey::ALL {
            self.matches[key.index()] += pred_groups
                .groups()
                .iter()
                .zip(truth_groups.groups())
                .map(|(p, t)| count_match(p, t, key))
                .sum::<u64>();
        }
        self.vocabulary_warnings += pred.iter().map(|r| validate_record(r).len() as u64).sum::<u64>();
    }

    pub fn merge(&mut self, other: &EvalTally) {
        let (c, o) = (&mut self.counts, &other.counts);
        c.reports += o.reports;
        c.jsonable += o.jsonable;
        c.exact_matches += o.exact_matches;
        c.close_matches += o.close_matches;
        c.truth_lesions += o.truth_lesions;
        c.predicted_lesions += o.predicted_lesions;
        for (mine, theirs) in self.matches.iter_mut().zip(other.matches) {
            *mine += theirs;
        }
        self.vocabulary_warnings += other.vocabulary_warnings;
    }

    pub fn summary(&self) -> EvalSummary {
        let c = self.counts;
        let mut flags = Vec::new();
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        if c.reports == 0 {
            flags.push(Degeneracy::EmptyCorpus);
        }
        if c.truth_lesions == 0 {
            flags.push(Degeneracy::NoTruthLesions);
        }
        if c.predicted_lesions == 0 {
            flags.push(Degeneracy::NoPredictedLesions);
        }
        let per_key = AttributeKey::ALL
            .into_iter()
            .map(|key| {
                let matches = self.matches[key.index()];
                let recall = ratio(matches, c.truth_lesions);
                let precision = ratio(matches, c.predicted_lesions);
                (key, KeyScore { matches, recall, precision, f1: f1_score(precision, recall) })
            })
            .collect();
        EvalSummary {
            jsonable_acc: ratio(c.jsonable, c.reports),
            em_acc: ratio(c.exact_matches, c.reports),
            cdm_acc: ratio(c.close_matches, c.reports),
            per_key,
            counts: c,
            flags,
            vocabulary_warnings: self.vocabulary_warnings,
        }
    }
}

/// Harmonic mean; 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * (precision * recall) / (precision + recall)
    }
}

pub fn per_key_metrics(pairs: &[EvalPair]) -> BTreeMap<AttributeKey, KeyScore> {
    evaluate_corpus(pairs).per_key
}

pub fn evaluate_corpus(pairs: &[EvalPair]) -> EvalSummary {
    let mut tally = EvalTally::default();
    for pair in pairs {
        tally.add(pair);
    }
    tally.summary()
}

/// Evaluates shards on up to `workers` threads and merges their tallies.
pub fn evaluate_corpus_sharded(pairs: &[EvalPair], workers: usize) -> EvalSummary {
    let workers = workers.max(1);
    if pairs.is_empty() || workers == 1 {
        return evaluate_corpus(pairs);
    }
    let chunk = pairs.len().div_ceil(workers);
    let tallies: Vec<EvalTally> = std::thread::scope(|scope| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|shard| {
                scope.spawn(move || {
                    let mut tally = EvalTally::default();
                    shard.iter().for_each(|p| tally.add(p));
                    tally
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut total = EvalTally::default();
    tallies.iter().for_each(|t| total.merge(t));
    total.summary()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lesion(side: &str, clock: &str, ty: &str) -> LesionRecord {
        LesionRecord::empty()
            .with(AttributeKey::SideOfBreast, side)
            .with(AttributeKey::ClockPosition, clock)
            .with(AttributeKey::LesionType, ty)
    }

    fn pair(pred: Option<Vec<LesionRecord>>, truth: Vec<LesionRecord>) -> EvalPair {
        EvalPair {
            report_id: "r".into(),
            prediction: ExtractionOutput::new("r", "test", String::new(), pred),
            truth,
        }
    }

    #[test]
    fn sort_examples() {
        let sorted = sort_lesions(&[lesion("right", "12", "mass"), lesion("right", "1", "mass")]);
        assert_eq!(sorted[0].get(AttributeKey::ClockPosition), "1");
        let sorted = sort_lesions(&[lesion("left", "n/a", "seroma"), lesion("left", "3", "cyst")]);
        assert_eq!(sorted[0].get(AttributeKey::LesionType), "cyst");
        assert_eq!(sorted[1].get(AttributeKey::LesionType), "seroma");
        assert!(sort_lesions(&[]).is_empty());
        let sorted = sort_lesions(&[lesion("n/a", "1", "a"), lesion("right", "1", "a"), lesion("left", "1", "a")]);
        let sides: Vec<_> = sorted.iter().map(|r| r.get(AttributeKey::SideOfBreast)).collect();
        assert_eq!(sides, ["left", "right", "n/a"]);
    }

    #[test]
    fn distance_sorts_numerically() {
        let a = lesion("left", "3", "cyst").with(AttributeKey::DistanceFromNipple, "10");
        let b = lesion("left", "3", "cyst").with(AttributeKey::DistanceFromNipple, "9");
        let c = lesion("left", "3", "cyst");
        let sorted = sort_lesions(&[c, a, b]);
        let d: Vec<_> = sorted.iter().map(|r| r.get(AttributeKey::DistanceFromNipple)).collect();
        assert_eq!(d, ["9", "10", "n/a"]);
    }

    #[test]
    fn split_examples() {
        let g = split_by_side(&[lesion("left", "1", "a"), lesion("right", "1", "a"), lesion("left", "2", "a")]);
        assert_eq!((g.left.len(), g.right.len(), g.na.len()), (2, 1, 0));
        let g = split_by_side(&[lesion("n/a", "1", "a"), lesion("n/a", "2", "a")]);
        assert_eq!((g.left.len(), g.right.len(), g.na.len()), (0, 0, 2));
    }

    #[test]
    fn len_and_match_basics() {
        let a = vec![lesion("left", "1", "cyst"), lesion("right", "2", "mass")];
        assert!(len_match(&a, &a));
        assert!(len_match(&[], &[]));
        assert!(!len_match(&a[..1], &a));
        assert!(em_match(&a, &a) && cdm_match(&a, &a));
        assert_eq!(count_match(&[], &a, AttributeKey::LesionType), 0);
    }

    #[test]
    fn unjsonable_prediction_counts_as_empty() {
        let s = evaluate_corpus(&[pair(None, vec![lesion("left", "1", "cyst")])]);
        assert_eq!(s.jsonable_acc, 0.0);
        assert_eq!(s.counts.predicted_lesions, 0);
        assert_eq!(s.em_acc, 0.0);
        assert!(s.flags.contains(&Degeneracy::NoPredictedLesions));

        let s = evaluate_corpus(&[pair(None, vec![])]);
        assert_eq!((s.em_acc, s.cdm_acc, s.jsonable_acc), (1.0, 1.0, 0.0));
    }

    #[test]
    fn half_exact_corpus() {
        let t = vec![lesion("left", "1", "cyst")];
        let s = evaluate_corpus(&[
            pair(Some(t.clone()), t.clone()),
            pair(Some(vec![]), t.clone()),
        ]);
        assert_eq!((s.em_acc, s.cdm_acc, s.jsonable_acc), (0.5, 0.5, 1.0));
    }

    #[test]
    fn identical_predictions_score_one() {
        let t = vec![lesion("left", "1", "cyst"), lesion("left", "n/a", "seroma"), lesion("n/a", "4", "mass")];
        let s = evaluate_corpus(&[pair(Some(t.iter().rev().cloned().collect()), t)]);
        for score in s.per_key.values() {
            assert_eq!((score.recall, score.precision, score.f1), (1.0, 1.0, 1.0));
        }
        assert_eq!((s.em_acc, s.cdm_acc), (1.0, 1.0));
    }

    #[test]
    fn empty_corpus_is_flagged() {
        let s = evaluate_corpus(&[]);
        assert_eq!(s.flags, vec![Degeneracy::EmptyCorpus, Degeneracy::NoTruthLesions, Degeneracy::NoPredictedLesions]);
        assert_eq!(s.em_acc, 0.0);
        assert!(s.per_key.values().all(|k| k.f1 == 0.0));
    }

    #[test]
    fn report_has_all_rows() {
        let t = vec![lesion("left", "1", "cyst")];
        let text = evaluate_corpus(&[pair(Some(t.clone()), t)]).render_report();
        assert_eq!(text.lines().filter(|l| l.ends_with("1.000")).count(), 16 + 1 + 3);
        assert!(text.contains("Average"));
        assert!(text.contains("suspicion of malignancy"));
    }
}
