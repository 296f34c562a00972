//! Report text for synthetic lesions.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::report_parser::SectionParser;
use crate::schema::{AttributeKey as K, LesionRecord, ReportDocument};

const DISCLOSURE: &str = "Disclosure: synthetic report generated for software testing. Not patient data.";

/// Assembles the full text and parses it back with the default section
/// rules, so the document is exactly what a reader of the text would get.
pub(super) fn document(id: &str, observation: String, impression: Option<String>) -> ReportDocument {
    let raw = format!(
        "EXAMINATION: Targeted breast ultrasound.\n\nObservation:\n{observation}\n\nImpression:\n{}\n\n{DISCLOSURE}\n",
        impression.as_deref().unwrap_or("No Impression")
    );
    SectionParser::default_rules().parse(id, &raw).expect("generated reports always have an observation")
}

fn value(r: &LesionRecord, key: K) -> Option<&str> {
    (!r.is_na(key)).then(|| r.get(key))
}

fn article(next: &str) -> &'static str {
    match next.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

fn size(rng: &mut ChaCha8Rng) -> String {
    format!("{}.{}", rng.random_range(0..3u32), rng.random_range(1..10u32))
}

fn join_list(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

fn a_observation(rng: &mut ChaCha8Rng, r: &LesionRecord) -> String {
    let mut noun = Vec::new();
    noun.push(format!("{} cm", size(rng)));
    if let Some(e) = value(r, K::Echogenicity) {
        noun.push(e.to_string());
    }
    match value(r, K::LesionShape) {
        Some("irregular") => noun.push("irregular shaped".into()),
        Some(s) => noun.push(s.to_string()),
        None => {}
    }
    noun.push(match value(r, K::LesionType) {
        Some("post-biopsy") => "post-biopsy change".to_string(),
        Some(t) => t.to_string(),
        None => "lesion".to_string(),
    });
    let noun = noun.join(" ");

    let mut parts = vec![format!("There is {} {noun}", article(&noun))];
    if let Some(side) = value(r, K::SideOfBreast) {
        parts.push(format!("in the {side} breast"));
    }
    if let Some(clock) = value(r, K::ClockPosition) {
        parts.push(format!("at {clock}:00"));
    }
    let mut sentence = parts.join(" ");
    if let Some(d) = value(r, K::DistanceFromNipple) {
        sentence.push_str(&format!(", {d} cm from the nipple"));
    }
    if let Some(region) = value(r, K::AnatomicalRegion) {
        sentence.push_str(&format!(", in the {region} region"));
    }
    if let Some(depth) = value(r, K::Depth) {
        sentence.push_str(&format!(", at {depth} depth"));
    }

    let mut with = Vec::new();
    if let Some(m) = value(r, K::LesionMargins) {
        with.push(format!("{m} margins"));
    }
    if let Some(o) = value(r, K::Orientation) {
        with.push(format!("{o} orientation"));
    }
    if let Some(p) = value(r, K::PosteriorFeatures) {
        with.push(format!("posterior acoustic {p}"));
    }
    match value(r, K::Calcifications) {
        Some("yes") => with.push("calcifications".into()),
        Some(_) => with.push("no calcifications".into()),
        None => {}
    }
    match value(r, K::Vascularity) {
        Some("present") => with.push("internal vascularity".into()),
        Some(_) => with.push("no internal vascularity".into()),
        None => {}
    }
    if !with.is_empty() {
        sentence.push_str(", with ");
        sentence.push_str(&join_list(&with));
    }
    sentence.push('.');
    sentence
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    chars.next().map_or_else(String::new, |c| c.to_uppercase().chain(chars).collect())
}

fn suspicion_phrase(s: &str) -> String {
    match s {
        "low" | "moderate" | "high" => format!("{s} suspicion of malignancy"),
        other => other.to_string(),
    }
}

fn a_impression(r: &LesionRecord) -> Option<String> {
    let mut items = Vec::new();
    if let Some(s) = value(r, K::SuspicionOfMalignancy) {
        items.push(suspicion_phrase(s));
    }
    if let Some(s) = value(r, K::LesionSubtype) {
        items.push(s.to_string());
    }
    if let Some(n) = value(r, K::NextStep) {
        items.push(format!("recommend {n}"));
    }
    if items.is_empty() {
        return None;
    }
    let side = capitalize(r.get(K::SideOfBreast));
    Some(format!("{side} {}:00: {}.", r.get(K::ClockPosition), items.join(", ")))
}

/// Fixed phrasing: one sentence per lesion, one impression sentence per
/// lesion with impression content.
pub(super) fn family_a(rng: &mut ChaCha8Rng, lesions: &[LesionRecord]) -> (String, Option<String>) {
    let mut sentences: Vec<String> = lesions.iter().map(|r| a_observation(rng, r)).collect();
    if lesions.is_empty() {
        sentences.push("No suspicious cystic or solid masses identified.".into());
    } else if rng.random_bool(0.5) {
        sentences.push("No other suspicious cystic or solid masses identified.".into());
    }
    let impression: Vec<String> = lesions.iter().filter_map(a_impression).collect();
    (sentences.join(" "), (!impression.is_empty()).then(|| impression.join(" ")))
}

fn pick<'a>(rng: &mut ChaCha8Rng, options: &[&'a str]) -> &'a str {
    options[rng.random_range(0..options.len())]
}

fn b_location(rng: &mut ChaCha8Rng, r: &LesionRecord) -> String {
    let mut parts = Vec::new();
    if let Some(side) = value(r, K::SideOfBreast) {
        parts.push(match rng.random_range(0..3) {
            0 => side.to_uppercase(),
            1 => format!("{side} breast"),
            _ => format!("the {side}"),
        });
    }
    if let Some(clock) = value(r, K::ClockPosition) {
        parts.push(match rng.random_range(0..3) {
            0 => format!("{clock} o'clock"),
            1 => format!("{clock}:00"),
            _ => format!("{clock}:30"),
        });
    }
    if let Some(d) = value(r, K::DistanceFromNipple) {
        parts.push(match rng.random_range(0..3) {
            0 => format!("N{d}"),
            1 => format!("{d} cm FN"),
            _ => format!("{d} cm from nipple"),
        });
    }
    if let Some(region) = value(r, K::AnatomicalRegion) {
        parts.push(region.to_string());
    }
    parts.join(" ")
}

fn b_descriptors(rng: &mut ChaCha8Rng, r: &LesionRecord) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(d) = value(r, K::Depth) {
        out.push(pick(rng, &[&format!("{d} third"), &format!("depth: {d}")]).to_string());
    }
    if let Some(s) = value(r, K::LesionShape) {
        out.push(pick(rng, &[&format!("{s} in shape"), &format!("shape: {s}")]).to_string());
    }
    if let Some(o) = value(r, K::Orientation) {
        out.push(match o {
            "parallel" => pick(rng, &["parallel to the skin", "parallel orientation"]).to_string(),
            "non-parallel" => pick(rng, &["not parallel to the skin", "nonparallel orientation"]).to_string(),
            other => format!("orientation {other}"),
        });
    }
    if let Some(m) = value(r, K::LesionMargins) {
        out.push(pick(rng, &[&format!("margins are {m}"), &format!("{m} margin")]).to_string());
    }
    if let Some(e) = value(r, K::Echogenicity) {
        out.push(pick(rng, &[e, &format!("{e} echotexture")]).to_string());
    }
    match value(r, K::Calcifications) {
        Some("yes") => out.push(pick(rng, &["calcified", "internal microcalcifications"]).into()),
        Some(_) => out.push(pick(rng, &["without calcifications", "no associated calcification"]).into()),
        None => {}
    }
    match value(r, K::Vascularity) {
        Some("present") => out.push(pick(rng, &["vascular flow", "hypervascular"]).into()),
        Some(_) => out.push(pick(rng, &["avascular", "without vascular flow"]).into()),
        None => {}
    }
    if let Some(p) = value(r, K::PosteriorFeatures) {
        out.push(pick(rng, &[&format!("posterior {p}"), &format!("{p} posteriorly")]).to_string());
    }
    out.shuffle(rng);
    out
}

fn b_impression(rng: &mut ChaCha8Rng, r: &LesionRecord) -> Option<String> {
    let mut items = Vec::new();
    if let Some(s) = value(r, K::SuspicionOfMalignancy) {
        items.push(match s {
            "probably benign" => pick(rng, &["PROBABLY BENIGN", "probably benign finding"]).to_string(),
            "high" => pick(rng, &["HIGHLY SUSPICIOUS", "high-suspicion"]).to_string(),
            other => format!("{} suspicion", other.to_uppercase()),
        });
    }
    if let Some(s) = value(r, K::LesionSubtype) {
        items.push(format!("likely {s}"));
    }
    if let Some(n) = value(r, K::NextStep) {
        items.push(match n {
            "6 months follow-up" => "follow-up ultrasound in 6 months".to_string(),
            "12 months follow-up" => "follow-up in twelve months".to_string(),
            "mri follow up" => "follow-up MRI".to_string(),
            other => other.to_string(),
        });
    }
    if items.is_empty() {
        return None;
    }
    let location = b_location(rng, r);
    let text = items.join(". ");
    Some(match location.is_empty() {
        true => format!("{text}."),
        false => format!("{}: {text}.", capitalize(&location)),
    })
}

/// Varied phrasing: shorthand locations, synonyms, shuffled descriptors and
/// impression text spread across several sentences.
pub(super) fn family_b(rng: &mut ChaCha8Rng, lesions: &[LesionRecord]) -> (String, Option<String>) {
    let mut sentences = Vec::new();
    if rng.random_bool(0.5) {
        sentences.push("Targeted sonographic evaluation was performed.".to_string());
    }
    for r in lesions {
        let kind = value(r, K::LesionType).unwrap_or("finding");
        let location = b_location(rng, r);
        let descriptors = b_descriptors(rng, r);
        let lead = match rng.random_range(0..3) {
            0 => format!("At the {location} location, there is a {} cm {kind}", size(rng)),
            1 => format!("{} {kind} noted at {location}", capitalize(article(kind))),
            _ => format!("Again seen is a {kind}, {location}"),
        };
        let sentence = match descriptors.is_empty() {
            true => format!("{lead}."),
            false => format!("{lead}, {}.", descriptors.join(", ")),
        };
        sentences.push(sentence);
    }
    if lesions.is_empty() {
        sentences.push("Negative for suspicious masses.".into());
    }
    let impression: Vec<String> = lesions.iter().filter_map(|r| b_impression(rng, r)).collect();
    (sentences.join(" "), (!impression.is_empty()).then(|| impression.join(" ")))
}
