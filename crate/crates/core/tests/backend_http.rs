//! OpenAI-compatible client against a local stub server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use base64::Engine;
use pustage_core::backend::{Backend, BackendConfig, BackendError, ImagePart, OpenAiBackend, PromptRequest};

#[derive(Debug, Clone)]
struct Seen {
    headers: Vec<(String, String)>,
    body: String,
}

/// Serves one canned `(status, body, delay)` per connection, in order.
fn stub(replies: Vec<(u16, String, Duration)>) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body, delay) in replies {
            let Ok((stream, _)) = listener.accept() else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut length = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some((k, v)) = line.trim_end().split_once(':') {
                    let (k, v) = (k.trim().to_ascii_lowercase(), v.trim().to_string());
                    if k == "content-length" {
                        length = v.parse().unwrap_or(0);
                    }
                    headers.push((k, v));
                }
            }
            let mut buf = vec![0u8; length];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Seen { headers, body: String::from_utf8_lossy(&buf).into_owned() });
            thread::sleep(delay);
            let mut stream = stream;
            let _ = write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    (url, seen)
}

fn completion(text: &str) -> String {
    serde_json::json!({
        "choices": [{ "message": { "role": "assistant", "content": text } }],
        "usage": { "prompt_tokens": 12, "completion_tokens": 3 }
    })
    .to_string()
}

fn config(url: &str, max_retries: u32) -> BackendConfig {
    BackendConfig {
        endpoint_url: url.to_string(),
        model_name: "stub-model".into(),
        api_key_env: "PUSTAGE_TEST_UNSET_KEY".into(),
        timeout_secs: 5.0,
        max_retries,
        retry_backoff_base_secs: 0.01,
        ..BackendConfig::default()
    }
}

fn request(images: Vec<ImagePart>) -> PromptRequest {
    PromptRequest {
        system_text: "You are a wound-care assistant.".into(),
        user_text: "What stage is this?".into(),
        images,
        support_examples: vec![],
        decode_constraint: None,
        max_output_tokens: 64,
        temperature: 0.0,
    }
}

const NOW: Duration = Duration::ZERO;

#[test]
fn retries_server_errors_then_succeeds() {
    let (url, seen) = stub(vec![
        (500, "{}".into(), NOW),
        (500, "{}".into(), NOW),
        (200, completion("Stage: II"), NOW),
    ]);
    let backend = OpenAiBackend::new(config(&url, 3)).unwrap();
    let resp = backend.complete(&request(vec![])).unwrap();
    assert_eq!(resp.text, "Stage: II");
    assert_eq!(resp.retries, 2);
    assert_eq!(resp.token_counts, Some((12, 3)));
    assert_eq!(resp.backend_id, "stub-model");
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_error_is_not_retried() {
    let (url, seen) = stub(vec![(401, r#"{"error":"bad key"}"#.into(), NOW), (200, completion("x"), NOW)]);
    let backend = OpenAiBackend::new(config(&url, 3)).unwrap();
    match backend.complete(&request(vec![])) {
        Err(BackendError::Api { status, body }) => {
            assert_eq!(status, 401);
            assert!(body.contains("bad key"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn zero_retries_makes_one_attempt() {
    let (url, seen) = stub(vec![(503, "{}".into(), NOW), (200, completion("x"), NOW)]);
    let backend = OpenAiBackend::new(config(&url, 0)).unwrap();
    let err = backend.complete(&request(vec![])).unwrap_err();
    assert!(matches!(err, BackendError::Api { status: 503, .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn exhausted_retries_report_attempts() {
    let (url, _) = stub(vec![(500, "{}".into(), NOW), (502, "{}".into(), NOW)]);
    let backend = OpenAiBackend::new(config(&url, 1)).unwrap();
    let err = backend.complete(&request(vec![])).unwrap_err();
    assert!(matches!(err, BackendError::RetriesExhausted { attempts: 2, .. }), "{err:?}");
}

#[test]
fn timeout_is_reported() {
    let (url, _) = stub(vec![(200, completion("late"), Duration::from_millis(800))]);
    let cfg = BackendConfig { timeout_secs: 0.2, ..config(&url, 0) };
    let err = OpenAiBackend::new(cfg).unwrap().complete(&request(vec![])).unwrap_err();
    assert_eq!(err, BackendError::Timeout);
}

#[test]
fn large_image_round_trips_and_key_comes_from_env() {
    let bytes: Vec<u8> = (0..1024 * 1024).map(|i| (i * 31 % 251) as u8).collect();
    let (url, seen) = stub(vec![(200, completion("Stage: IV"), NOW)]);
    std::env::set_var("PUSTAGE_TEST_KEY_A", "sk-test-123");
    let cfg = BackendConfig { api_key_env: "PUSTAGE_TEST_KEY_A".into(), ..config(&url, 0) };
    let image = ImagePart { mime_type: "image/png".into(), bytes: bytes.clone() };
    OpenAiBackend::new(cfg).unwrap().complete(&request(vec![image])).unwrap();

    let seen = seen.lock().unwrap();
    let auth = seen[0].headers.iter().find(|(k, _)| k == "authorization").map(|(_, v)| v.as_str());
    assert_eq!(auth, Some("Bearer sk-test-123"));
    let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["messages"][0]["role"], "system");
    let url = body["messages"][1]["content"][0]["image_url"]["url"].as_str().unwrap();
    let payload = url.strip_prefix("data:image/png;base64,").unwrap();
    let decoded = base64::engine::general_purpose::STANDARD.decode(payload).unwrap();
    assert_eq!(decoded, bytes);
    assert_eq!(body["messages"][1]["content"][1]["text"], "What stage is this?");
}

#[test]
fn missing_key_sends_no_authorization() {
    let (url, seen) = stub(vec![(200, completion("ok"), NOW)]);
    OpenAiBackend::new(config(&url, 0)).unwrap().complete(&request(vec![])).unwrap();
    assert!(seen.lock().unwrap()[0].headers.iter().all(|(k, _)| k != "authorization"));
}

#[test]
fn debug_log_elides_images() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("debug.jsonl");
    let (url, _) = stub(vec![(200, completion("Stage: I"), NOW)]);
    let cfg = BackendConfig { debug_log: Some(log.clone()), ..config(&url, 0) };
    let image = ImagePart { mime_type: "image/jpeg".into(), bytes: vec![7u8; 4096] };
    OpenAiBackend::new(cfg).unwrap().complete(&request(vec![image])).unwrap();
    let text = std::fs::read_to_string(log).unwrap();
    assert!(text.contains("image elided"));
    assert!(!text.contains("base64,"));
}
