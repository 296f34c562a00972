//! Client for chat-completions compatible endpoints.
//!
//! Each report becomes one request carrying a single user message. The
//! reply text is read from the first choice and kept verbatim; parsing is
//! left to the output normalizer.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, ExtractionOutput, Extractor};
use crate::output_normalizer::OutputParser;
use crate::prompt_builder::{build_finetune_instruction, FewShotExample, PromptTemplate};
use crate::schema::ReportDocument;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    /// Delay before the first retry; doubled on every further retry.
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, backoff_ms: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmEndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Environment variable holding the API key. Empty: send no
    /// authorization header.
    pub api_key_env: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub request_timeout_secs: f64,
    pub max_concurrent_requests: usize,
    pub retry: RetryPolicy,
}

impl Default for LlmEndpointConfig {
    fn default() -> Self {
        LlmEndpointConfig {
            base_url: "http://localhost:8000/v1".to_string(),
            model_name: "default".to_string(),
            api_key_env: "BUREX_API_KEY".to_string(),
            temperature: 0.0,
            max_output_tokens: 2048,
            request_timeout_secs: 120.0,
            max_concurrent_requests: 4,
            retry: RetryPolicy::default(),
        }
    }
}

impl LlmEndpointConfig {
    // Negated comparisons so NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), BackendError> {
        let invalid = |m: &str| Err(BackendError::InvalidConfig(m.to_string()));
        if self.max_concurrent_requests < 1 {
            return invalid("max_concurrent_requests must be at least 1");
        }
        if !(self.temperature >= 0.0) {
            return invalid("temperature must be non-negative");
        }
        if !(self.request_timeout_secs > 0.0) {
            return invalid("request_timeout_secs must be positive");
        }
        if self.base_url.trim().is_empty() {
            return invalid("base_url is empty");
        }
        Ok(())
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

/// How a report is turned into a prompt.
#[derive(Debug, Clone)]
pub enum PromptMode {
    /// The zero-shot instruction shared with fine-tuning.
    Instruction,
    /// The few-shot labeling prompt.
    Label { template: PromptTemplate, examples: Vec<FewShotExample> },
}

impl PromptMode {
    pub fn render(&self, report: &ReportDocument) -> String {
        match self {
            PromptMode::Instruction => build_finetune_instruction(report),
            PromptMode::Label { template, examples } => template.render(examples, report),
        }
    }
}

pub struct LlmClient {
    config: LlmEndpointConfig,
    http: Client,
    api_key: Option<String>,
    prompt: PromptMode,
    parser: OutputParser,
    name: String,
}

enum Attempt {
    Done(String),
    Retry(BackendError),
    Fail(BackendError),
}

impl LlmClient {
    pub fn new(config: LlmEndpointConfig, prompt: PromptMode) -> Result<Self, BackendError> {
        config.validate()?;
        let api_key = if config.api_key_env.is_empty() {
            None
        } else {
            Some(std::env::var(&config.api_key_env).map_err(|_| {
                BackendError::AuthFailure(format!(
                    "environment variable {} is not set",
                    config.api_key_env
                ))
            })?)
        };
        let http = Client::builder()
            .timeout(Duration::from_secs_f64(config.request_timeout_secs))
            .build()
            .map_err(|e| BackendError::InvalidConfig(e.to_string()))?;
        let name = format!("llm:{}", config.model_name);
        Ok(LlmClient { config, http, api_key, prompt, parser: OutputParser::default(), name })
    }

    pub fn with_parser(mut self, parser: OutputParser) -> Self {
        self.parser = parser;
        self
    }

    pub fn config(&self) -> &LlmEndpointConfig {
        &self.config
    }

    fn attempt(&self, body: &Value, attempts: u32) -> Attempt {
        let mut request = self.http.post(self.config.endpoint()).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = match request.send() {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry(BackendError::Transport { attempts, message: e.to_string() })
            }
        };
        let status = response.status();
        let text = match response.text() {
            Ok(t) => t,
            Err(e) => {
                return Attempt::Retry(BackendError::Transport { attempts, message: e.to_string() })
            }
        };
        match status {
            s if s.is_success() => match reply_content(&text) {
                Ok(content) => Attempt::Done(content),
                Err(e) => Attempt::Fail(e),
            },
            StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => {
                Attempt::Fail(BackendError::AuthFailure(format!("HTTP {}: {}", status.as_u16(), text)))
            }
            StatusCode::TOO_MANY_REQUESTS => Attempt::Retry(BackendError::RateLimited { attempts }),
            s if s.is_server_error() => Attempt::Retry(BackendError::Transport {
                attempts,
                message: format!("HTTP {}: {}", s.as_u16(), text),
            }),
            s => Attempt::Fail(BackendError::HttpStatus { status: s.as_u16(), body: text }),
        }
    }

    /// Sends one prompt and returns the reply text.
    pub fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let body = json!({
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_output_tokens,
        });
        let total = self.config.retry.max_retries + 1;
        let mut delay = self.config.retry.backoff_ms;
        for attempts in 1..=total {
            match self.attempt(&body, attempts) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) if attempts == total => return Err(e),
                Attempt::Retry(_) => {
                    std::thread::sleep(Duration::from_millis(delay));
                    delay = delay.saturating_mul(2);
                }
            }
        }
        unreachable!("the final attempt always returns")
    }

    pub fn extract_prompt(&self, prompt: &str, report_id: &str) -> Result<ExtractionOutput, BackendError> {
        let started = std::time::Instant::now();
        let raw = self.complete(prompt)?;
        let mut out = ExtractionOutput::from_reply(report_id, &self.name, raw, &self.parser);
        out.latency_secs = started.elapsed().as_secs_f64();
        Ok(out)
    }
}

fn reply_content(body: &str) -> Result<String, BackendError> {
    let value: Value = serde_json::from_str(body)
        .map_err(|e| BackendError::MalformedReply(format!("reply is not JSON: {e}")))?;
    match &value["choices"][0]["message"]["content"] {
        Value::String(s) => Ok(s.clone()),
        Value::Null => Err(BackendError::MalformedReply("no choices[0].message.content".into())),
        other => Err(BackendError::MalformedReply(format!("content is not text: {other}"))),
    }
}

impl Extractor for LlmClient {
    fn name(&self) -> &str {
        &self.name
    }

    fn extract(&self, report: &ReportDocument) -> Result<ExtractionOutput, BackendError> {
        self.extract_prompt(&self.prompt.render(report), &report.id)
    }

    fn max_concurrency(&self) -> usize {
        self.config.max_concurrent_requests
    }
}

/// One-off request: sends `prompt` and parses the reply.
pub fn extract_llm(
    config: &LlmEndpointConfig,
    prompt: &str,
    report_id: &str,
) -> Result<ExtractionOutput, BackendError> {
    LlmClient::new(config.clone(), PromptMode::Instruction)?.extract_prompt(prompt, report_id)
}
