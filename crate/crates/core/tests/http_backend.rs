use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use antislop_core::backend::{Backend, BackendError, ChunkRequest, EndpointConfig, HttpBackend};
use antislop_core::pattern::compile_banlist;
use antislop_core::sampler::{generate, GenerateError, SamplerConfig};

const OK_BODY: &str = r#"{"choices":[{"text":" tapestry rug","finish_reason":"length","logprobs":{
"tokens":[" tapestry"," rug"],
"token_logprobs":[-0.1,-0.5],
"top_logprobs":[{" tapestry":-0.1," rug":-2.4," mat":-3.0},{" rug":-0.5," mat":-1.0}]}}]}"#;

/// Serve one canned (status, body) per connection, in order; the last one
/// repeats. Returns the base URL and the captured request bodies.
fn stub(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    std::thread::spawn(move || {
        for (i, stream) in listener.incoming().enumerate() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
            }
            let mut body = vec![0; len];
            let _ = reader.read_exact(&mut body);
            log.lock().unwrap().push(String::from_utf8_lossy(&body).into_owned());
            let (status, text) = &responses[i.min(responses.len() - 1)];
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
            let _ = stream.write_all(reply.as_bytes());
        }
    });
    (url, seen)
}

fn endpoint(url: &str) -> EndpointConfig {
    let mut c = EndpointConfig::new(url);
    c.backoff_base = Duration::from_millis(1);
    c.backoff_cap = Duration::from_millis(5);
    c.timeout = Duration::from_secs(5);
    c
}

fn request() -> ChunkRequest {
    ChunkRequest {
        prompt_text: "Once".into(),
        max_tokens: 2,
        temperature: 1.0,
        top_p: 1.0,
        top_k: None,
        min_p: 0.0,
        top_logprobs: 3,
        stop_sequences: vec![],
        seed: Some(9),
    }
}

#[test]
fn retries_transient_failures() {
    let busy = (503, "busy".to_string());
    let (url, seen) = stub(vec![busy.clone(), busy.clone(), busy, (200, OK_BODY.into())]);
    let b = HttpBackend::new(endpoint(&url)).unwrap();
    let r = b.next_chunk(&request()).unwrap();
    assert_eq!(r.attempts, 4);
    assert_eq!(r.tokens.len(), 2);
    assert_eq!(seen.lock().unwrap().len(), 4);
}

#[test]
fn gives_up_after_max_attempts() {
    let (url, _) = stub(vec![(503, "down".into())]);
    let mut cfg = endpoint(&url);
    cfg.max_attempts = 3;
    let err = HttpBackend::new(cfg).unwrap().next_chunk(&request()).unwrap_err();
    match err {
        BackendError::Transport { attempts, message } => {
            assert_eq!(attempts, 3);
            assert!(message.contains("503"), "{message}");
        }
        other => panic!("expected transport error, got {other:?}"),
    }
}

#[test]
fn missing_logprobs_is_a_config_error() {
    let (url, seen) = stub(vec![(200, r#"{"choices":[{"text":"hi","finish_reason":"length"}]}"#.into())]);
    let err = HttpBackend::new(endpoint(&url)).unwrap().next_chunk(&request()).unwrap_err();
    assert!(matches!(err, BackendError::Config(_)), "{err:?}");
    assert_eq!(seen.lock().unwrap().len(), 1, "config errors are not retried");
}

#[test]
fn client_error_is_not_retried() {
    let (url, seen) = stub(vec![(400, "bad".into())]);
    let err = HttpBackend::new(endpoint(&url)).unwrap().next_chunk(&request()).unwrap_err();
    assert!(matches!(err, BackendError::Config(_)));
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn request_carries_sampling_fields() {
    let (url, seen) = stub(vec![(200, OK_BODY.into())]);
    let mut cfg = endpoint(&url);
    cfg.model = Some("m".into());
    HttpBackend::new(cfg).unwrap().next_chunk(&request()).unwrap();
    let body: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
    assert_eq!(body["logprobs"], 3);
    assert_eq!(body["seed"], 9);
    assert_eq!(body["model"], "m");
    assert_eq!(body["top_k"], -1);
    assert_eq!(body["prompt"], "Once");
}

#[test]
fn sampler_backtracks_over_http() {
    let (url, _) = stub(vec![(200, OK_BODY.into())]);
    let b = HttpBackend::new(endpoint(&url)).unwrap();
    let ban = compile_banlist(&["tapestry".to_string()], &[], &[], &[], 3).unwrap();
    let cfg = SamplerConfig { max_new_tokens: 6, chunk_size: 2, top_logprobs_count: 3, min_p: 0.0, ..Default::default() };
    let g = generate(&b, "Once", &ban, &cfg, 1).unwrap();
    assert!(!g.text.contains("tapestry"), "{}", g.text);
    assert!(g.stats.backtracks > 0);
    assert_eq!(g.trace.len(), 6);
}

#[test]
fn transport_failure_surfaces_position() {
    let (url, _) = stub(vec![(500, "x".into())]);
    let mut cfg = endpoint(&url);
    cfg.max_attempts = 2;
    let b = HttpBackend::new(cfg).unwrap();
    let err = generate(&b, "Once", &compile_banlist(&[], &[], &[], &[], 3).unwrap(), &SamplerConfig::default(), 1)
        .unwrap_err();
    assert!(matches!(err, GenerateError::Backend { position: 0, source: BackendError::Transport { attempts: 2, .. } }));
}
