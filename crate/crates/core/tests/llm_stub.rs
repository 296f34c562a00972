//! The chat-completions client against a local scripted HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{json, Value};

use burex_core::backends::{extract_batch, BackendError, LlmClient, LlmEndpointConfig, PromptMode, RetryPolicy};
use burex_core::schema::{AttributeKey, ReportDocument};

#[derive(Debug, Clone)]
struct Request {
    path: String,
    headers: Vec<(String, String)>,
    body: Value,
}

impl Request {
    fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }

    fn prompt(&self) -> &str {
        self.body["messages"][0]["content"].as_str().unwrap_or_default()
    }
}

type Handler = dyn Fn(usize, &Request) -> (u16, String) + Send + Sync;

struct Stub {
    base_url: String,
    requests: Arc<Mutex<Vec<Request>>>,
}

fn read_request(stream: &mut TcpStream) -> Option<Request> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let path = line.split_whitespace().nth(1)?.to_string();
    let mut headers = Vec::new();
    loop {
        line.clear();
        reader.read_line(&mut line).ok()?;
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        let (k, v) = l.split_once(':')?;
        headers.push((k.trim().to_string(), v.trim().to_string()));
    }
    let len = headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
        .and_then(|(_, v)| v.parse().ok())
        .unwrap_or(0);
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(Request { path, headers, body: serde_json::from_slice(&body).unwrap_or(Value::Null) })
}

/// Serves until the test process exits. `handler` gets the 0-based request
/// number and the request.
fn serve(handler: Box<Handler>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base_url = format!("http://{}/v1", listener.local_addr().unwrap());
    let requests = Arc::new(Mutex::new(Vec::new()));
    let seen = Arc::clone(&requests);
    let handler: Arc<Handler> = Arc::from(handler);
    let counter = Arc::new(AtomicUsize::new(0));
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let (seen, handler, counter) = (Arc::clone(&seen), Arc::clone(&handler), Arc::clone(&counter));
            thread::spawn(move || {
                let Some(request) = read_request(&mut stream) else { return };
                let n = counter.fetch_add(1, Ordering::SeqCst);
                seen.lock().unwrap().push(request.clone());
                let (status, body) = handler(n, &request);
                let response = format!(
                    "HTTP/1.1 {status} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(response.as_bytes());
            });
        }
    });
    Stub { base_url, requests }
}

fn reply(content: &str) -> String {
    json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]}).to_string()
}

const LESIONS: &str = r#"[{"location": {"side_of_breast": "left", "clock_position": "3", "distance_from_nipple": "2"}, "type": "cyst"}]"#;

fn config(stub: &Stub) -> LlmEndpointConfig {
    LlmEndpointConfig {
        base_url: stub.base_url.clone(),
        model_name: "stub-model".into(),
        api_key_env: String::new(),
        request_timeout_secs: 10.0,
        retry: RetryPolicy { max_retries: 2, backoff_ms: 5 },
        ..LlmEndpointConfig::default()
    }
}

fn report(id: &str) -> ReportDocument {
    ReportDocument::from_sections(id, format!("Simple cyst noted [case {id}]."), None)
}

#[test]
fn successful_reply_is_parsed_and_request_is_well_formed() {
    let stub = serve(Box::new(|_, _| (200, reply(LESIONS))));
    let client = LlmClient::new(config(&stub), PromptMode::Instruction).unwrap();
    let out = client.extract_prompt("describe the lesions", "r1").unwrap();
    assert_eq!(out.raw_text, LESIONS);
    let lesions = out.parsed.expect("reply parses");
    assert_eq!(lesions.len(), 1);
    assert_eq!(lesions[0].get(AttributeKey::LesionType), "cyst");
    assert_eq!(lesions[0].get(AttributeKey::Depth), "n/a");

    let requests = stub.requests.lock().unwrap();
    assert_eq!(requests.len(), 1);
    let r = &requests[0];
    assert_eq!(r.path, "/v1/chat/completions");
    assert_eq!(r.body["model"], "stub-model");
    assert_eq!(r.body["messages"][0]["role"], "user");
    assert_eq!(r.prompt(), "describe the lesions");
    assert_eq!(r.body["temperature"], 0.0);
    assert_eq!(r.body["max_tokens"], 2048);
    assert!(r.header("authorization").is_none(), "empty api_key_env sends no key");
}

#[test]
fn bearer_key_is_sent_from_the_environment() {
    std::env::set_var("BUREX_STUB_TEST_KEY", "sk-test-123");
    let stub = serve(Box::new(|_, _| (200, reply("[]"))));
    let cfg = LlmEndpointConfig { api_key_env: "BUREX_STUB_TEST_KEY".into(), ..config(&stub) };
    let out = LlmClient::new(cfg, PromptMode::Instruction).unwrap().extract_prompt("p", "r").unwrap();
    assert_eq!(out.parsed, Some(vec![]));
    assert_eq!(stub.requests.lock().unwrap()[0].header("authorization"), Some("Bearer sk-test-123"));
}

#[test]
fn missing_key_variable_is_an_auth_failure() {
    let stub = serve(Box::new(|_, _| (200, reply("[]"))));
    let cfg = LlmEndpointConfig { api_key_env: "BUREX_STUB_TEST_UNSET_KEY".into(), ..config(&stub) };
    assert!(matches!(LlmClient::new(cfg, PromptMode::Instruction), Err(BackendError::AuthFailure(_))));
}

#[test]
fn server_errors_are_retried() {
    let stub = serve(Box::new(|n, _| if n == 0 { (500, "overloaded".into()) } else { (200, reply(LESIONS)) }));
    let client = LlmClient::new(config(&stub), PromptMode::Instruction).unwrap();
    let out = client.extract_prompt("p", "r").unwrap();
    assert!(out.parsed.is_some());
    assert_eq!(stub.requests.lock().unwrap().len(), 2);
}

#[test]
fn rate_limit_exhaustion_reports_attempts() {
    let stub = serve(Box::new(|_, _| (429, "{}".into())));
    let client = LlmClient::new(config(&stub), PromptMode::Instruction).unwrap();
    let err = client.complete("p").unwrap_err();
    assert!(matches!(err, BackendError::RateLimited { attempts: 3 }), "{err}");
    assert_eq!(stub.requests.lock().unwrap().len(), 3);
}

#[test]
fn unauthorized_is_not_retried() {
    let stub = serve(Box::new(|_, _| (401, "bad key".into())));
    let client = LlmClient::new(config(&stub), PromptMode::Instruction).unwrap();
    assert!(matches!(client.complete("p"), Err(BackendError::AuthFailure(_))));
    assert_eq!(stub.requests.lock().unwrap().len(), 1);
}

#[test]
fn client_errors_are_not_retried() {
    let stub = serve(Box::new(|_, _| (400, "context too long".into())));
    let client = LlmClient::new(config(&stub), PromptMode::Instruction).unwrap();
    match client.complete("p") {
        Err(BackendError::HttpStatus { status, body }) => {
            assert_eq!(status, 400);
            assert_eq!(body, "context too long");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(stub.requests.lock().unwrap().len(), 1);
}

#[test]
fn malformed_envelope_is_reported() {
    for body in ["not json", r#"{"choices": []}"#, r#"{"choices": [{"message": {"content": 5}}]}"#] {
        let stub = serve(Box::new(move |_, _| (200, body.into())));
        let client = LlmClient::new(config(&stub), PromptMode::Instruction).unwrap();
        assert!(matches!(client.complete("p"), Err(BackendError::MalformedReply(_))), "{body}");
    }
}

#[test]
fn unparseable_content_is_kept_verbatim() {
    let stub = serve(Box::new(|_, _| (200, reply("Sorry, I cannot help with that."))));
    let out = LlmClient::new(config(&stub), PromptMode::Instruction).unwrap().extract_prompt("p", "r").unwrap();
    assert_eq!(out.raw_text, "Sorry, I cannot help with that.");
    assert!(out.parsed.is_none());
}

#[test]
fn connection_refused_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = LlmEndpointConfig {
        base_url: format!("http://127.0.0.1:{port}/v1"),
        api_key_env: String::new(),
        retry: RetryPolicy { max_retries: 1, backoff_ms: 1 },
        ..LlmEndpointConfig::default()
    };
    let err = LlmClient::new(cfg, PromptMode::Instruction).unwrap().complete("p").unwrap_err();
    assert!(matches!(err, BackendError::Transport { attempts: 2, .. }), "{err}");
}

#[test]
fn batch_keeps_input_order_under_concurrency() {
    // Echo the report id back as the clock position; fail one report.
    let stub = serve(Box::new(|_, r| {
        let prompt = r.prompt();
        let id: usize = prompt.split("[case r").nth(1).and_then(|s| s.split(']').next()).unwrap().parse().unwrap();
        if id == 7 {
            return (400, "rejected".into());
        }
        thread::sleep(std::time::Duration::from_millis(((id * 7) % 5) as u64 * 5));
        let clock = id % 12 + 1;
        (200, reply(&format!(r#"[{{"location": {{"clock_position": "{clock}"}}}}]"#)))
    }));
    let cfg = LlmEndpointConfig { max_concurrent_requests: 4, ..config(&stub) };
    let client = LlmClient::new(cfg, PromptMode::Instruction).unwrap();
    let reports: Vec<ReportDocument> = (0..20).map(|i| report(&format!("r{i}"))).collect();
    let items = extract_batch(&client, &reports);
    assert_eq!(items.len(), 20);
    for (i, item) in items.iter().enumerate() {
        match item {
            Ok(out) => {
                assert_eq!(out.report_id, format!("r{i}"));
                let clock = out.parsed.as_ref().unwrap()[0].get(AttributeKey::ClockPosition).to_string();
                assert_eq!(clock, (i % 12 + 1).to_string());
            }
            Err(failure) => {
                assert_eq!(i, 7);
                assert_eq!(failure.report_id, "r7");
            }
        }
    }
    assert!(items[7].is_err());
}
