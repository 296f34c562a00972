pub mod adapter_math;
pub mod backends;
pub mod dataset;
pub mod jsonl;
pub mod metrics;
pub mod output_normalizer;
pub mod prompt_builder;
pub mod report_parser;
pub mod schema;
pub mod synth;
