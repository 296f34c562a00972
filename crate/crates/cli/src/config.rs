//! Optional TOML configuration. Command-line flags override every value
//! read here.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use burex_core::backends::LlmEndpointConfig;
use burex_core::dataset::SplitRatios;
use burex_core::report_parser::SectionRules;
use burex_core::schema::AttributeKey;
use burex_core::synth::{MutationSpec, TemplateFamily};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub concurrency: Option<usize>,
    pub ratios: Option<SplitRatios>,
    pub endpoint: Option<LlmEndpointConfig>,
    pub sections: Option<SectionRules>,
    pub synth: SynthSection,
    pub mutation: Option<MutationSpec>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_reports: Option<usize>,
    pub family: Option<TemplateFamily>,
    pub lesions_per_report: Option<Vec<(usize, f64)>>,
    pub na_rate_per_key: Option<BTreeMap<AttributeKey, f64>>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_config_parses() {
        let text = r#"
seed = 7
concurrency = 3

[ratios]
train = 0.8
validation = 0.1
test = 0.1

[endpoint]
base_url = "http://127.0.0.1:9000/v1"
model_name = "tuned"

[endpoint.retry]
max_retries = 1

[sections]
observation_headers = ["Findings"]

[synth]
n_reports = 12
family = "B"
na_rate_per_key = { depth = 1.0 }

[mutation]
drop_lesion_rate = 0.2
swap_attribute_rate = 0.0
na_out_rate = 0.1
seed = 3
"#;
        let config: FileConfig = toml::from_str(text).unwrap();
        assert_eq!(config.seed, Some(7));
        let endpoint = config.endpoint.unwrap();
        assert_eq!(endpoint.model_name, "tuned");
        assert_eq!(endpoint.retry.max_retries, 1);
        assert_eq!(endpoint.max_output_tokens, 2048);
        assert_eq!(config.synth.family, Some(TemplateFamily::B));
        assert_eq!(config.synth.na_rate_per_key.unwrap()[&AttributeKey::Depth], 1.0);
        assert_eq!(config.ratios.unwrap().train, 0.8);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(toml::from_str::<FileConfig>("sede = 1").is_err());
    }
}
