use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use logo_core::embedding::{EmbeddingProvider, HttpEmbedder};
use logo_core::llm::{BackendConfig, BackendKind, LlmError, RetryPolicy};
use logo_core::llm::{LlmBackend, LlmRequest};
use logo_core::template::TemplateRegistry;

struct Captured {
    auth: Option<String>,
    body: serde_json::Value,
}

/// Serves the scripted `(status, body)` replies in order, one per
/// connection, and records what it received.
fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Captured>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (name, value) = line.split_once(':').unwrap_or((line, ""));
                match name.to_ascii_lowercase().as_str() {
                    "content-length" => len = value.trim().parse().unwrap(),
                    "authorization" => auth = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            log.lock().unwrap().push(Captured {
                auth,
                body: serde_json::from_slice(&buf).unwrap_or(serde_json::Value::Null),
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn chat(text: &str) -> String {
    serde_json::json!({ "choices": [{ "message": { "role": "assistant", "content": text } }] })
        .to_string()
}

fn http_config(url: &str, attempts: u32) -> BackendConfig {
    BackendConfig {
        kind: BackendKind::Http {
            endpoint: url.to_string(),
            model: "test-model".into(),
            api_key_env: "LOGO_TEST_KEY_UNSET".into(),
            system_preamble: Some("be brief".into()),
            timeout_ms: 5_000,
        },
        max_in_flight: 2,
        retry: RetryPolicy {
            attempts,
            backoff_ms: 1,
        },
    }
}

#[test]
fn sends_chat_request_and_reads_content() {
    let (url, seen) = serve(vec![(200, chat(" crime "))]);
    let backend = http_config(&url, 3)
        .build(&TemplateRegistry::builtin())
        .unwrap();
    let mut request = LlmRequest::new("generic", "classify this");
    request.max_tokens = 32;
    assert_eq!(backend.complete(&request).unwrap(), " crime ");
    let seen = seen.lock().unwrap();
    let body = &seen[0].body;
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["max_tokens"], 32);
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][0]["content"], "be brief");
    assert_eq!(body["messages"][1]["content"], "classify this");
    assert_eq!(seen[0].auth, None);
}

#[test]
fn retries_server_errors_then_succeeds() {
    let (url, seen) = serve(vec![
        (503, "busy".into()),
        (429, "slow down".into()),
        (200, chat("ok")),
    ]);
    let backend = http_config(&url, 3)
        .build(&TemplateRegistry::builtin())
        .unwrap();
    assert_eq!(
        backend.complete(&LlmRequest::new("generic", "p")).unwrap(),
        "ok"
    );
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn gives_up_after_the_attempt_budget() {
    let (url, seen) = serve(vec![(503, "a".into()), (503, "b".into())]);
    let backend = http_config(&url, 2)
        .build(&TemplateRegistry::builtin())
        .unwrap();
    match backend.complete(&LlmRequest::new("generic", "p")) {
        Err(LlmError::RetriesExhausted { attempts: 2, last }) => {
            assert!(matches!(*last, LlmError::Http { status: 503, .. }))
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(vec![(400, "bad request".into())]);
    let backend = http_config(&url, 5)
        .build(&TemplateRegistry::builtin())
        .unwrap();
    let err = backend
        .complete(&LlmRequest::new("generic", "p"))
        .unwrap_err();
    assert!(matches!(err, LlmError::Http { status: 400, .. }), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn malformed_body_is_reported() {
    let (url, _) = serve(vec![(200, "{\"choices\": []}".into())]);
    let backend = http_config(&url, 1)
        .build(&TemplateRegistry::builtin())
        .unwrap();
    let err = backend
        .complete(&LlmRequest::new("generic", "p"))
        .unwrap_err();
    assert!(matches!(err, LlmError::Malformed(_)), "{err:?}");
}

#[test]
fn embedder_reads_vectors_and_checks_dimension() {
    let reply = serde_json::json!({ "data": [{ "embedding": [0.5, -0.5, 0.0] }] }).to_string();
    let (url, seen) = serve(vec![(200, reply.clone()), (200, reply)]);
    let e = HttpEmbedder::new(url.clone(), "emb", 3, Some("secret".into())).unwrap();
    assert_eq!(e.embed("hello").unwrap().values(), &[0.5, -0.5, 0.0]);
    {
        let seen = seen.lock().unwrap();
        assert_eq!(seen[0].body["input"], "hello");
        assert_eq!(seen[0].auth.as_deref(), Some("Bearer secret"));
    }
    let wrong = HttpEmbedder::new(url, "emb", 4, None).unwrap();
    assert!(wrong.embed("hello").is_err());
}
