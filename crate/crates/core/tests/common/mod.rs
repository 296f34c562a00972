//! Fixtures and an independent reference implementation of the metrics,
//! shared by the integration tests.
#![allow(dead_code)]

use std::cmp::Ordering;

use serde_json::Value;

pub const TWO_LESION_OBSERVATION: &str = "At the right 9:00 axis, 1 cm from the nipple, there is a 0.4 cm simple cyst. At the left 6:00 retroareolar location, there is a 0.6 x 0.4 x 0.6 cm hypoechoic mass, probably benign may represent a debris-filled cyst and corresponding to the previous mass annotated at the \"left nipple posterior\" location on exam dated MM/DD/YYYY. No other suspicious cystic or solid masses identified in either breast.";

pub const TWO_LESION_IMPRESSION: &str = "PROBABLY BENIGN - FOLLOW-UP RECOMMENDED Left 6:00 retroareolar 0.6 cm hypoechoic mass, probably benign cyst with debris. Recommend follow-up ultrasound in 6 months to assess stability. I personally discussed the findings and recommendations with the patient.";

pub fn two_lesion_report() -> String {
    format!("Observation:\n{TWO_LESION_OBSERVATION}\n\nImpression:\n{TWO_LESION_IMPRESSION}\n")
}

/// The labeled output for the two-lesion report, as printed.
pub const TWO_LESION_OUTPUT: &str = r#"[{
"location": {
"side_of_breast": "right",
"clock_position": "9",
"distance_from_nipple": "1"
},
"depth": "N/A",
"anatomical_region": "N/A",
"type": "cyst",
"shape": "N/A",
"orientation": "N/A",
"margin": "N/A",
"echogenicity": "N/A",
"calcifications": "N/A",
"vascularity": "N/A",
"posterior_features": "N/A",
"suspicion": "N/A",
"subtype": "N/A",
"next_step": "N/A"
},
{
"location": {
"side_of_breast": "left",
"clock_position": "6",
"distance_from_nipple": "N/A"
},
"depth": "N/A",
"anatomical_region": "retroareolar",
"type": "mass",
"shape": "N/A",
"orientation": "N/A",
"margin": "N/A",
"echogenicity": "hypoechoic",
"calcifications": "N/A",
"vascularity": "N/A",
"posterior_features": "N/A",
"suspicion": "probably benign",
"subtype": "cyst with debris",
"next_step": "follow-up ultrasound in 6 months"
}]"#;

/// Builds a serialized lesion; unspecified fields are "n/a".
pub fn lesion(side: &str, clock: &str, distance: &str, fields: &[(&str, &str)]) -> Value {
    let mut v = serde_json::json!({
        "location": {"side_of_breast": side, "clock_position": clock, "distance_from_nipple": distance},
    });
    for name in DESCRIPTIVE_FIELDS {
        v[name] = Value::String("n/a".into());
    }
    for (name, value) in fields {
        v[*name] = Value::String(value.to_string());
    }
    v
}

/// Missed-lesion case: the prediction finds only the cyst.
pub fn missed_lesion_case() -> (Vec<Value>, Vec<Value>) {
    let cyst = lesion("left", "3", "9", &[("type", "cyst")]);
    let seroma = lesion("left", "n/a", "n/a", &[("type", "seroma")]);
    (vec![cyst.clone()], vec![seroma, cyst])
}

/// Attribute-confusion case: the 12:00 follow-up interval is attached to
/// both masses and the suspicion is missed.
pub fn confused_attribute_case() -> (Vec<Value>, Vec<Value>) {
    let mass = |clock: &str, suspicion: &str, next: &str| {
        lesion("right", clock, "n/a", &[("type", "mass"), ("suspicion", suspicion), ("next_step", next)])
    };
    let prediction = vec![mass("12", "n/a", "6 month follow-up"), mass("1", "n/a", "6 month follow-up")];
    let truth = vec![
        mass("12", "probably benign", "6 month follow-up"),
        mass("1", "probably benign", "12 month follow-up"),
    ];
    (prediction, truth)
}

// ---------------------------------------------------------------------------
// Reference metrics. Written directly from the metric definitions over
// plain JSON objects, sharing no code with the library.

pub const LOCATION_FIELDS: [&str; 3] = ["side_of_breast", "clock_position", "distance_from_nipple"];
pub const DESCRIPTIVE_FIELDS: [&str; 13] = [
    "depth",
    "anatomical_region",
    "type",
    "shape",
    "orientation",
    "margin",
    "echogenicity",
    "calcifications",
    "vascularity",
    "posterior_features",
    "subtype",
    "next_step",
    "suspicion",
];

/// All sixteen fields in key order; the first ten are the close-domain set.
pub const ALL_FIELDS: [&str; 16] = [
    "depth",
    "anatomical_region",
    "type",
    "shape",
    "orientation",
    "margin",
    "echogenicity",
    "calcifications",
    "vascularity",
    "posterior_features",
    "subtype",
    "next_step",
    "suspicion",
    "side_of_breast",
    "clock_position",
    "distance_from_nipple",
];

pub fn field(lesion: &Value, name: &str) -> String {
    let v = if LOCATION_FIELDS.contains(&name) { &lesion["location"][name] } else { &lesion[name] };
    v.as_str().unwrap_or("n/a").to_string()
}

/// `Some(list)` when `raw` is a JSON list of objects.
pub fn naive_parse(raw: &str) -> Option<Vec<Value>> {
    match serde_json::from_str::<Value>(raw) {
        Ok(Value::Array(items)) if items.iter().all(Value::is_object) => Some(items),
        _ => None,
    }
}

fn order_key(l: &Value) -> (u8, String, u32, f64, Vec<String>) {
    let side = field(l, "side_of_breast");
    let rank = match side.as_str() {
        "left" => 0,
        "right" => 1,
        "n/a" => 3,
        _ => 2,
    };
    let clock = field(l, "clock_position").parse::<u32>().unwrap_or(u32::MAX);
    let distance = field(l, "distance_from_nipple").parse::<f64>().unwrap_or(f64::INFINITY);
    let mut rest: Vec<String> = LOCATION_FIELDS.iter().map(|f| field(l, f)).collect();
    rest.extend(DESCRIPTIVE_FIELDS.iter().map(|f| field(l, f)));
    (rank, side, clock, distance, rest)
}

pub fn naive_sort(list: &[Value]) -> Vec<Value> {
    let mut out = list.to_vec();
    out.sort_by(|a, b| order_key(a).partial_cmp(&order_key(b)).unwrap_or(Ordering::Equal));
    out
}

fn all_equal(pred: &[Value], truth: &[Value], fields: &[&str]) -> bool {
    if pred.len() != truth.len() {
        return false;
    }
    for i in 0..pred.len() {
        for f in fields {
            if field(&pred[i], f) != field(&truth[i], f) {
                return false;
            }
        }
    }
    true
}

fn side_group(list: &[Value], side: &str) -> Vec<Value> {
    list.iter()
        .filter(|l| {
            let s = field(l, "side_of_breast");
            match side {
                "left" | "right" => s == side,
                _ => s != "left" && s != "right",
            }
        })
        .cloned()
        .collect()
}

pub fn naive_count_match(pred: &[Value], truth: &[Value], name: &str) -> u64 {
    let n = pred.len().min(truth.len());
    let mut count = 0;
    for i in 0..n {
        if field(&pred[i], name) == field(&truth[i], name) {
            count += 1;
        }
    }
    count
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaiveScores {
    pub jsonable_acc: f64,
    pub em_acc: f64,
    pub cdm_acc: f64,
    /// (matches, recall, precision, f1) per field, in key order.
    pub per_key: Vec<(u64, f64, f64, f64)>,
}

pub fn naive_evaluate(corpus: &[(String, Vec<Value>)]) -> NaiveScores {
    let n = corpus.len();
    let (mut jsonable, mut em, mut cdm) = (0u64, 0u64, 0u64);
    let mut matches = [0u64; 16];
    let (mut truth_total, mut pred_total) = (0u64, 0u64);
    for (raw, truth) in corpus {
        let parsed = naive_parse(raw);
        if parsed.is_some() {
            jsonable += 1;
        }
        let pred = naive_sort(&parsed.unwrap_or_default());
        let truth = naive_sort(truth);
        truth_total += truth.len() as u64;
        pred_total += pred.len() as u64;
        if all_equal(&pred, &truth, &ALL_FIELDS) {
            em += 1;
        }
        if all_equal(&pred, &truth, &ALL_FIELDS[..10]) {
            cdm += 1;
        }
        for side in ["left", "right", "n/a"] {
            let p = side_group(&pred, side);
            let t = side_group(&truth, side);
            for (k, name) in ALL_FIELDS.iter().enumerate() {
                matches[k] += naive_count_match(&p, &t, name);
            }
        }
    }
    let frac = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_key = matches
        .iter()
        .map(|&m| {
            let r = frac(m, truth_total);
            let p = frac(m, pred_total);
            let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            (m, r, p, f1)
        })
        .collect();
    NaiveScores { jsonable_acc: frac(jsonable, n as u64), em_acc: frac(em, n as u64), cdm_acc: frac(cdm, n as u64), per_key }
}
