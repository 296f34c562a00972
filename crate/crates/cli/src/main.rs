//! `burex`: breast ultrasound report extraction from the command line.

mod config;
mod io;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use burex_core::adapter_math::verification_table;
use burex_core::backends::{
    extract_batch, BatchItem, ExtractionOutput, Extractor, LlmClient, PromptMode, RuleExtractor,
};
use burex_core::dataset::{build_dataset, split, LabelSource, SplitRatios};
use burex_core::metrics::{evaluate_corpus_sharded, EvalPair};
use burex_core::prompt_builder::{build_finetune_instruction, FewShotExample, PromptTemplate};
use burex_core::report_parser::SectionParser;
use burex_core::schema::ReportDocument;
use burex_core::synth::{corrupt, generate_corpus_parallel, MutationSpec, SynthConfig, TemplateFamily};

use config::FileConfig;
use io::{read_records, read_reports, write_atomic, write_json, write_records, SectionRecord, TextRecord, TruthRecord};

#[derive(Parser)]
#[command(name = "burex", version, about = "Structured lesion extraction from breast ultrasound reports")]
struct Cli {
    /// TOML configuration file; flags take precedence over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split raw reports into observation and impression sections.
    Parse(IoArgs),
    /// Render prompts for reports without sending them.
    Prompt {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        prompt: PromptArgs,
    },
    /// Label reports with an LLM using the few-shot labeling prompt.
    Label {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        prompt: PromptArgs,
        #[command(flatten)]
        endpoint: EndpointArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Extract lesions with the rule engine or an LLM.
    Extract {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long, value_enum, default_value = "rules")]
        backend: Backend,
        /// Prompt style for the llm backend.
        #[arg(long, value_enum, default_value = "instruction")]
        prompt_style: PromptStyle,
        #[command(flatten)]
        prompt: PromptArgs,
        #[command(flatten)]
        endpoint: EndpointArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Generate a synthetic corpus with ground truth.
    Gen {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        family: Option<TemplateFamily>,
        /// Output directory; receives reports.jsonl and truths.jsonl.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        concurrency: Option<usize>,
    },
    /// Corrupt a prediction file and record every change in a ledger.
    Corrupt {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        drop_rate: Option<f64>,
        #[arg(long)]
        swap_rate: Option<f64>,
        #[arg(long)]
        na_rate: Option<f64>,
    },
    /// Build or split an instruction-tuning dataset.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Text report destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the summary as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        concurrency: Option<usize>,
    },
    /// Run the low-rank adaptation numerical checks.
    LoraCheck {
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Pair reports with labels as {id, instruction, input, output} records.
    Build {
        #[arg(long)]
        reports: PathBuf,
        /// Prediction file holding the labels.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "llm")]
        source: LabelSource,
        #[arg(long)]
        out: PathBuf,
        /// Provenance manifest; defaults to `<out>.manifest.json`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Split a dataset (or any file of records with an `id`) by seed.
    Split {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train, validation and test ratios, e.g. 0.9,0.07,0.03.
        #[arg(long)]
        ratios: Option<SplitRatios>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct IoArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PromptArgs {
    /// Few-shot examples: records of {observation, impression, output}.
    #[arg(long)]
    examples: Option<PathBuf>,
    /// TOML file overriding the labeling prompt blocks.
    #[arg(long)]
    template: Option<PathBuf>,
    /// Render the fine-tuning instruction instead of the labeling prompt
    /// (prompt subcommand only).
    #[arg(long)]
    instruction: bool,
}

#[derive(Args)]
struct EndpointArgs {
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the API key; empty for none.
    #[arg(long)]
    api_key_env: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    concurrency: Option<usize>,
    /// Keep measured latencies in the output (makes it non-reproducible).
    #[arg(long)]
    timings: bool,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Backend {
    Rules,
    Llm,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum PromptStyle {
    Instruction,
    Label,
}

fn section_parser(config: &FileConfig) -> Result<SectionParser> {
    let rules = config.sections.clone().unwrap_or_default();
    Ok(SectionParser::new(&rules)?)
}

fn load_label_mode(args: &PromptArgs) -> Result<PromptMode> {
    let template = match &args.template {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing template {}", path.display()))?
        }
        None => PromptTemplate::default(),
    };
    let examples: Vec<FewShotExample> = match &args.examples {
        Some(path) => read_records(path)?,
        None => Vec::new(),
    };
    Ok(PromptMode::Label { template, examples })
}

fn endpoint_config(
    config: &FileConfig,
    args: &EndpointArgs,
    concurrency: Option<usize>,
) -> burex_core::backends::LlmEndpointConfig {
    let mut endpoint = config.endpoint.clone().unwrap_or_default();
    if let Some(url) = &args.base_url {
        endpoint.base_url = url.clone();
    }
    if let Some(model) = &args.model {
        endpoint.model_name = model.clone();
    }
    if let Some(env) = &args.api_key_env {
        endpoint.api_key_env = env.clone();
    }
    if let Some(n) = concurrency.or(config.concurrency) {
        endpoint.max_concurrent_requests = n;
    }
    endpoint
}

/// Turns batch results into prediction records. Failed reports become
/// records with no parsed lesions and the error as a diagnostic.
fn prediction_records(items: Vec<BatchItem>, backend: &str, timings: bool) -> (Vec<ExtractionOutput>, usize) {
    let mut failures = 0;
    let records = items
        .into_iter()
        .map(|item| {
            let mut out = match item {
                Ok(out) => out,
                Err(failure) => {
                    failures += 1;
                    eprintln!("warning: report {}: {}", failure.report_id, failure.error);
                    let mut out = ExtractionOutput::new(failure.report_id, backend, String::new(), None);
                    out.diagnostics.push(format!("backend error: {}", failure.error));
                    out
                }
            };
            if !timings {
                out.latency_secs = 0.0;
            }
            out
        })
        .collect();
    (records, failures)
}

fn run_extraction(backend: &dyn Extractor, reports: &[ReportDocument], out: &Path, run: &RunArgs) -> Result<()> {
    let (records, failures) = prediction_records(extract_batch(backend, reports), backend.name(), run.timings);
    write_records(out, &records)?;
    let jsonable = records.iter().filter(|r| r.parsed.is_some()).count();
    eprintln!(
        "{} reports, {} parseable replies, {} failures -> {}",
        records.len(),
        jsonable,
        failures,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PromptRecord {
    id: String,
    prompt: String,
}

fn read_ids(path: &Path) -> Result<Vec<String>> {
    let values: Vec<serde_json::Value> = read_records(path)?;
    values
        .iter()
        .enumerate()
        .map(|(i, v)| match v.get("id") {
            Some(serde_json::Value::String(id)) => Ok(id.clone()),
            _ => bail!("{}: record {} has no string id", path.display(), i + 1),
        })
        .collect()
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Parse(io) => {
            let parser = section_parser(&config)?;
            let mut records = Vec::new();
            let mut failures = 0;
            for raw in io::read_raw_reports(&io.input)? {
                let parsed = match raw {
                    io::RawReport::Text(TextRecord { id, text }) => parser.parse(&id, &text),
                    io::RawReport::Sections(s) => Ok(ReportDocument::from_sections(s.id, s.observation, s.impression)),
                };
                match parsed {
                    Ok(doc) => records.push(SectionRecord::from(&doc)),
                    Err(e) => {
                        failures += 1;
                        eprintln!("error: {e}");
                    }
                }
            }
            write_records(&io.out, &records)?;
            eprintln!("{} reports parsed, {} failed -> {}", records.len(), failures, io.out.display());
            return Ok(if failures > 0 { ExitCode::FAILURE } else { ExitCode::SUCCESS });
        }
        Command::Prompt { io, prompt } => {
            let reports = read_reports(&io.input, &section_parser(&config)?)?;
            let records: Vec<PromptRecord> = if prompt.instruction {
                reports.iter().map(|r| PromptRecord { id: r.id.clone(), prompt: build_finetune_instruction(r) }).collect()
            } else {
                let mode = load_label_mode(&prompt)?;
                reports.iter().map(|r| PromptRecord { id: r.id.clone(), prompt: mode.render(r) }).collect()
            };
            write_records(&io.out, &records)?;
        }
        Command::Label { io, prompt, endpoint, run } => {
            let reports = read_reports(&io.input, &section_parser(&config)?)?;
            let client = LlmClient::new(endpoint_config(&config, &endpoint, run.concurrency), load_label_mode(&prompt)?)?;
            run_extraction(&client, &reports, &io.out, &run)?;
        }
        Command::Extract { io, backend, prompt_style, prompt, endpoint, run } => {
            let reports = read_reports(&io.input, &section_parser(&config)?)?;
            match backend {
                Backend::Rules => {
                    let workers = run.concurrency.or(config.concurrency).unwrap_or(1);
                    run_extraction(&RuleExtractor { workers }, &reports, &io.out, &run)?;
                }
                Backend::Llm => {
                    let mode = match prompt_style {
                        PromptStyle::Instruction => PromptMode::Instruction,
                        PromptStyle::Label => load_label_mode(&prompt)?,
                    };
                    let client = LlmClient::new(endpoint_config(&config, &endpoint, run.concurrency), mode)?;
                    run_extraction(&client, &reports, &io.out, &run)?;
                }
            }
        }
        Command::Gen { seed, n, family, out, concurrency } => {
            let defaults = SynthConfig::default();
            let s = &config.synth;
            let synth = SynthConfig {
                seed: seed.or(config.seed).unwrap_or(defaults.seed),
                n_reports: n.or(s.n_reports).unwrap_or(defaults.n_reports),
                lesions_per_report: s.lesions_per_report.clone().unwrap_or(defaults.lesions_per_report),
                na_rate_per_key: {
                    let mut rates = defaults.na_rate_per_key;
                    rates.extend(s.na_rate_per_key.clone().unwrap_or_default());
                    rates
                },
                template_family: family.or(s.family).unwrap_or(defaults.template_family),
            };
            let workers = concurrency.or(config.concurrency).unwrap_or(1);
            let corpus = generate_corpus_parallel(&synth, workers)?;
            let reports: Vec<TextRecord> = corpus
                .iter()
                .map(|r| TextRecord { id: r.document.id.clone(), text: r.document.raw_text.clone() })
                .collect();
            let truths: Vec<TruthRecord> =
                corpus.iter().map(|r| TruthRecord { id: r.document.id.clone(), lesions: r.truth.clone() }).collect();
            write_records(&out.join("reports.jsonl"), &reports)?;
            write_records(&out.join("truths.jsonl"), &truths)?;
            eprintln!("{} reports -> {}", reports.len(), out.display());
        }
        Command::Corrupt { input, out, ledger, seed, drop_rate, swap_rate, na_rate } => {
            let base = config.mutation.unwrap_or_default();
            let spec = MutationSpec {
                drop_lesion_rate: drop_rate.unwrap_or(base.drop_lesion_rate),
                swap_attribute_rate: swap_rate.unwrap_or(base.swap_attribute_rate),
                na_out_rate: na_rate.unwrap_or(base.na_out_rate),
                seed: seed.or(config.seed).unwrap_or(base.seed),
            };
            for (name, rate) in [("drop", spec.drop_lesion_rate), ("swap", spec.swap_attribute_rate), ("na", spec.na_out_rate)] {
                if !(0.0..=1.0).contains(&rate) {
                    bail!("{name} rate {rate} is outside [0, 1]");
                }
            }
            let predictions: Vec<ExtractionOutput> = read_records(&input)?;
            let (mutated, entries) = corrupt(&predictions, &spec);
            write_records(&out, &mutated)?;
            write_records(&ledger, &entries)?;
            eprintln!("{} changes recorded -> {}", entries.len(), ledger.display());
        }
        Command::Dataset(DatasetCommand::Build { reports, labels, source, out, manifest }) => {
            let reports = read_reports(&reports, &section_parser(&config)?)?;
            let labels: Vec<ExtractionOutput> = read_records(&labels)?;
            let built = build_dataset(&reports, &labels, source);
            for skipped in &built.manifest.skipped {
                eprintln!("skipped: {skipped}");
            }
            write_records(&out, &built.records)?;
            let manifest = manifest.unwrap_or_else(|| {
                let mut name = out.clone().into_os_string();
                name.push(".manifest.json");
                PathBuf::from(name)
            });
            write_json(&manifest, &built.manifest)?;
            eprintln!(
                "{} records, {} skipped -> {}",
                built.records.len(),
                built.manifest.skipped.len(),
                out.display()
            );
        }
        Command::Dataset(DatasetCommand::Split { input, out, ratios, seed }) => {
            let ids = read_ids(&input)?;
            let ratios = ratios.or(config.ratios).unwrap_or_default();
            let result = split(&ids, ratios, seed.or(config.seed).unwrap_or(0))?;
            write_json(&out, &result)?;
            eprintln!(
                "train {}  validation {}  test {} -> {}",
                result.train.len(),
                result.validation.len(),
                result.test.len(),
                out.display()
            );
        }
        Command::Eval { pred, truth, out, json, concurrency } => {
            let predictions: Vec<ExtractionOutput> = read_records(&pred)?;
            let truths: Vec<TruthRecord> = read_records(&truth)?;
            let mut by_id: BTreeMap<String, ExtractionOutput> = BTreeMap::new();
            for p in predictions {
                if by_id.insert(p.report_id.clone(), p).is_some() {
                    bail!("{}: duplicate prediction ids", pred.display());
                }
            }
            let pairs: Vec<EvalPair> = truths
                .into_iter()
                .map(|t| {
                    let prediction = by_id.remove(&t.id).unwrap_or_else(|| {
                        eprintln!("warning: no prediction for {}; scored as unparseable", t.id);
                        ExtractionOutput::new(t.id.clone(), "missing", String::new(), None)
                    });
                    EvalPair { report_id: t.id, prediction, truth: t.lesions }
                })
                .collect();
            for id in by_id.keys() {
                eprintln!("warning: prediction {id} has no ground truth; ignored");
            }
            let summary = evaluate_corpus_sharded(&pairs, concurrency.or(config.concurrency).unwrap_or(1));
            let report = summary.render_report();
            match &out {
                Some(path) => write_atomic(path, report.as_bytes())?,
                None => print!("{report}"),
            }
            if let Some(path) = &json {
                write_json(path, &summary)?;
            }
        }
        Command::LoraCheck { json } => {
            let rows = verification_table();
            println!("{:<52}{:>14}{:>14}  result", "check", "measured", "bound");
            for row in &rows {
                println!(
                    "{:<52}{:>14.3e}{:>14.3e}  {}",
                    row.name,
                    row.measured,
                    row.threshold,
                    if row.passed { "pass" } else { "FAIL" }
                );
            }
            if let Some(path) = &json {
                write_json(path, &rows)?;
            }
            if rows.iter().any(|r| !r.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
