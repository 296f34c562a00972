//! Prompt construction: the few-shot labeling prompt and the zero-shot
//! instruction shared by fine-tuning and inference.

use serde::{Deserialize, Serialize};

use crate::output_normalizer::serialize_lesions_pretty;
use crate::schema::{LesionRecord, ReportDocument};

/// Version tag of the bundled fine-tuning instruction. Bump it whenever
/// `assets/finetune_instruction_v1.txt` is replaced.
pub const FINETUNE_INSTRUCTION_VERSION: &str = "v1";

const FINETUNE_INSTRUCTION: &str = include_str!("../assets/finetune_instruction_v1.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub observation: String,
    #[serde(default)]
    pub impression: String,
    #[serde(rename = "output")]
    pub expected_output: Vec<LesionRecord>,
}

/// Blocks of the labeling prompt. `example_template` understands the
/// placeholders `{index}`, `{observation}`, `{impression}` and `{output}`;
/// `input_block` understands `{observation}` and `{impression}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub preamble: String,
    pub example_template: String,
    pub instruction_block: String,
    pub additional_points: Vec<String>,
    pub input_block: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            preamble: include_str!("../assets/label_preamble.txt").to_string(),
            example_template: include_str!("../assets/label_example.txt").to_string(),
            instruction_block: include_str!("../assets/label_instructions.txt").to_string(),
            additional_points: include_str!("../assets/label_points.txt")
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string)
                .collect(),
            input_block: include_str!("../assets/label_input.txt").to_string(),
        }
    }
}

/// Single-pass `{name}` substitution; unknown or unterminated braces are
/// copied through, and substituted text is never rescanned.
fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let var = after
            .find('}')
            .and_then(|close| vars.iter().find(|(name, _)| *name == &after[..close]).map(|v| (close, v.1)));
        match var {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn ensure_newline(out: &mut String) {
    if !out.ends_with('\n') {
        out.push('\n');
    }
}

impl PromptTemplate {
    pub fn render(&self, examples: &[FewShotExample], report: &ReportDocument) -> String {
        let mut out = String::new();
        out.push_str(&self.preamble);
        ensure_newline(&mut out);
        if !examples.is_empty() {
            out.push_str("\n### Examples\n");
            for (i, example) in examples.iter().enumerate() {
                let index = (i + 1).to_string();
                let output = serialize_lesions_pretty(&example.expected_output);
                out.push_str(&fill(
                    &self.example_template,
                    &[
                        ("index", &index),
                        ("observation", &example.observation),
                        ("impression", &example.impression),
                        ("output", &output),
                    ],
                ));
                ensure_newline(&mut out);
                out.push('\n');
            }
        }
        out.push('\n');
        out.push_str(&self.instruction_block);
        ensure_newline(&mut out);
        out.push_str("\n\n## Additional Points to consider:\n\n");
        for (i, point) in self.additional_points.iter().enumerate() {
            out.push_str(&format!("{}. {}\n", i + 1, point));
        }
        out.push_str("\n\n");
        out.push_str(&fill(
            &self.input_block,
            &[
                ("observation", &report.observation),
                ("impression", report.impression.as_deref().unwrap_or("")),
            ],
        ));
        out
    }

    /// Recovers the observation and impression from a prompt rendered with
    /// this template. Returns `None` when the input block is not found.
    pub fn recover_input(&self, prompt: &str) -> Option<(String, String)> {
        let (prefix, rest) = self.input_block.split_once("{observation}")?;
        let (middle, suffix) = rest.split_once("{impression}")?;
        let start = prompt.rfind(prefix)? + prefix.len();
        let body = prompt[start..].strip_suffix(suffix)?;
        let split = body.rfind(middle)?;
        Some((body[..split].to_string(), body[split + middle.len()..].to_string()))
    }
}

/// Few-shot labeling prompt with the default template.
pub fn build_label_prompt(examples: &[FewShotExample], report: &ReportDocument) -> String {
    PromptTemplate::default().render(examples, report)
}

/// The fixed instruction text shared by every fine-tuning record and every
/// inference request.
pub fn finetune_instruction() -> &'static str {
    FINETUNE_INSTRUCTION.trim_end()
}

/// The report part of a fine-tuning prompt.
pub fn finetune_input(report: &ReportDocument) -> String {
    format!(
        "### Observation:\n{}\n\n### Impression:\n{}",
        report.observation,
        report.impression.as_deref().unwrap_or("")
    )
}

/// Zero-shot prompt: instruction followed by the report sections.
pub fn build_finetune_instruction(report: &ReportDocument) -> String {
    format!("{}\n\n{}\n", finetune_instruction(), finetune_input(report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::AttributeKey;
    use proptest::prelude::*;

    fn report(obs: &str, imp: Option<&str>) -> ReportDocument {
        ReportDocument::from_sections("r1", obs, imp.map(str::to_string))
    }

    fn example(i: usize) -> FewShotExample {
        FewShotExample {
            observation: format!("There is a cyst at the right {i}:00 location."),
            impression: "Benign.".into(),
            expected_output: vec![LesionRecord::empty()
                .with(AttributeKey::SideOfBreast, "right")
                .with(AttributeKey::ClockPosition, &i.to_string())],
        }
    }

    #[test]
    fn seven_examples_render_in_order() {
        let examples: Vec<_> = (1..=7).map(example).collect();
        let prompt = build_label_prompt(&examples, &report("At the right 9:00 axis.", Some("BENIGN")));
        assert!(prompt.contains("### Example 7"));
        assert!(!prompt.contains("### Example 8"));
        let positions: Vec<_> = (1..=7).map(|i| prompt.find(&format!("### Example {i}\n")).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert!(prompt.contains("Additional Points to consider"));
        for point in PromptTemplate::default().additional_points {
            assert!(prompt.contains(&point));
        }
        assert!(prompt.contains("\"clock_position\": \"7\""));
    }

    #[test]
    fn zero_examples_keep_fixed_blocks() {
        let prompt = build_label_prompt(&[], &report("A cyst.", None));
        assert!(!prompt.contains("### Example"));
        let order = ["### Template of Example", "## Instructions", "## Additional Points to consider", "# The input is as follows"];
        let positions: Vec<_> = order.iter().map(|s| prompt.find(s).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(PromptTemplate::default().additional_points.len(), 9);
        for i in 1..=9 {
            assert!(prompt.contains(&format!("\n{i}. ")));
        }
    }

    #[test]
    fn absent_impression_renders_empty_slot() {
        let prompt = build_label_prompt(&[], &report("A cyst.", None));
        assert!(prompt.contains("#### Impression:\n\n---"));
        let (obs, imp) = PromptTemplate::default().recover_input(&prompt).unwrap();
        assert_eq!((obs.as_str(), imp.as_str()), ("A cyst.", ""));
    }

    #[test]
    fn braces_in_report_text_are_not_placeholders() {
        let prompt = build_label_prompt(&[], &report("Text with {impression} inside.", Some("{observation}")));
        let (obs, imp) = PromptTemplate::default().recover_input(&prompt).unwrap();
        assert_eq!(obs, "Text with {impression} inside.");
        assert_eq!(imp, "{observation}");
    }

    #[test]
    fn finetune_instruction_is_shared() {
        let a = build_finetune_instruction(&report("At the right 9:00 axis, 1 cm from the nipple.", Some("BENIGN")));
        let b = build_finetune_instruction(&report("Another.", None));
        let prefix = finetune_instruction();
        assert!(a.starts_with(prefix) && b.starts_with(prefix));
        assert_ne!(a, b);
        assert!(a.contains("At the right 9:00 axis"));
        for key in AttributeKey::ALL {
            assert!(prefix.contains(key.name()), "{key}");
        }
    }

    proptest! {
        #[test]
        fn prompt_length_grows_with_examples(n in 0usize..7) {
            let r = report("A cyst.", Some("Benign."));
            let shorter = build_label_prompt(&(1..=n).map(example).collect::<Vec<_>>(), &r);
            let longer = build_label_prompt(&(1..=n + 1).map(example).collect::<Vec<_>>(), &r);
            prop_assert!(longer.len() > shorter.len());
        }

        #[test]
        fn input_block_round_trips(obs in "[A-Za-z0-9 ,.:\n]{1,80}", imp in proptest::option::of("[A-Za-z0-9 ,.:\n]{0,80}")) {
            let r = report(&obs, imp.as_deref());
            let prompt = build_label_prompt(&[example(1)], &r);
            let (o, i) = PromptTemplate::default().recover_input(&prompt).unwrap();
            prop_assert_eq!(o, obs);
            prop_assert_eq!(i, imp.unwrap_or_default());
        }
    }
}
