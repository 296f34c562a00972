//! Extraction engines and the order-preserving batch runner.

mod llm;
mod rules;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::output_normalizer::OutputParser;
use crate::schema::{LesionRecord, ReportDocument};

pub use llm::{extract_llm, LlmClient, LlmEndpointConfig, PromptMode, RetryPolicy};
pub use rules::{extract_rules, rule_lesions, RuleExtractor, RULES_BACKEND};

/// A backend's reply to one report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionOutput {
    pub report_id: String,
    /// The reply exactly as received.
    pub raw_text: String,
    /// `None` when the reply is not a valid list of records.
    pub parsed: Option<Vec<LesionRecord>>,
    pub backend_name: String,
    pub latency_secs: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl ExtractionOutput {
    pub fn new(
        report_id: impl Into<String>,
        backend_name: impl Into<String>,
        raw_text: String,
        parsed: Option<Vec<LesionRecord>>,
    ) -> Self {
        ExtractionOutput {
            report_id: report_id.into(),
            raw_text,
            parsed,
            backend_name: backend_name.into(),
            latency_secs: 0.0,
            diagnostics: Vec::new(),
        }
    }

    /// Parses `raw_text` with `parser`, keeping the raw text untouched.
    pub fn from_reply(
        report_id: impl Into<String>,
        backend_name: impl Into<String>,
        raw_text: String,
        parser: &OutputParser,
    ) -> Self {
        let outcome = parser.parse(&raw_text);
        let mut out = ExtractionOutput::new(report_id, backend_name, raw_text, outcome.records);
        out.diagnostics = outcome.diagnostics;
        out
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("malformed reply: {0}")]
    MalformedReply(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("invalid endpoint configuration: {0}")]
    InvalidConfig(String),
}

/// An extraction engine.
pub trait Extractor: Sync {
    fn name(&self) -> &str;

    fn extract(&self, report: &ReportDocument) -> Result<ExtractionOutput, BackendError>;

    /// Upper bound on concurrent `extract` calls in a batch.
    fn max_concurrency(&self) -> usize {
        1
    }
}

/// A report the backend failed on.
#[derive(Debug)]
pub struct BatchFailure {
    pub report_id: String,
    pub error: BackendError,
}

pub type BatchItem = Result<ExtractionOutput, BatchFailure>;

fn timed(backend: &dyn Extractor, report: &ReportDocument) -> BatchItem {
    let start = Instant::now();
    backend
        .extract(report)
        .map(|mut out| {
            out.latency_secs = start.elapsed().as_secs_f64();
            out
        })
        .map_err(|error| BatchFailure { report_id: report.id.clone(), error })
}

/// Runs `backend` over `reports` with at most `backend.max_concurrency()`
/// requests in flight. Results come back in input order, one per report;
/// a failing report never aborts the batch.
pub fn extract_batch(backend: &dyn Extractor, reports: &[ReportDocument]) -> Vec<BatchItem> {
    let workers = backend.max_concurrency().clamp(1, reports.len().max(1));
    if workers == 1 {
        return reports.iter().map(|r| timed(backend, r)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<BatchItem>>> = Mutex::new((0..reports.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(report) = reports.get(i) else { break };
                let item = timed(backend, report);
                slots.lock().expect("result slots poisoned")[i] = Some(item);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|slot| slot.expect("every report is processed"))
        .collect()
}
