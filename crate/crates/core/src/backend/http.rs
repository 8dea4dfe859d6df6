use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, Candidate, ChunkRequest, ChunkResponse, FinishReason, Token};

/// Where and how to reach a completions endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// e.g. `http://localhost:8000/v1`
    pub base_url: String,
    #[serde(default = "default_path")]
    pub path: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout: Duration,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base: Duration,
    #[serde(default = "default_backoff_cap")]
    pub backoff_cap: Duration,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_path() -> String {
    "/completions".into()
}
fn default_timeout() -> Duration {
    Duration::from_secs(480)
}
fn default_attempts() -> u32 {
    5
}
fn default_backoff() -> Duration {
    Duration::from_millis(500)
}
fn default_backoff_cap() -> Duration {
    Duration::from_secs(30)
}
fn default_in_flight() -> usize {
    50
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            path: default_path(),
            api_key: None,
            model: None,
            timeout: default_timeout(),
            max_attempts: default_attempts(),
            backoff_base: default_backoff(),
            backoff_cap: default_backoff_cap(),
            max_in_flight: default_in_flight(),
        }
    }

    pub fn url(&self) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), self.path.trim_start_matches('/'))
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self { permits: Mutex::new(n.max(1)), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *p == 0 {
            p = self.freed.wait(p).unwrap_or_else(|e| e.into_inner());
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.freed.notify_one();
    }
}

/// Blocking client for OpenAI-compatible `/v1/completions`.
pub struct HttpBackend {
    cfg: EndpointConfig,
    client: reqwest::blocking::Client,
    limiter: Semaphore,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend").field("url", &self.cfg.url()).finish()
    }
}

enum Attempt {
    Retry(String),
    Fatal(BackendError),
}

fn excerpt(body: &str) -> String {
    const MAX: usize = 400;
    if body.chars().count() <= MAX {
        body.to_string()
    } else {
        let mut s: String = body.chars().take(MAX).collect();
        s.push('…');
        s
    }
}

impl HttpBackend {
    pub fn new(cfg: EndpointConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| BackendError::Config(format!("cannot build HTTP client: {e}")))?;
        let limiter = Semaphore::new(cfg.max_in_flight);
        Ok(Self { cfg, client, limiter })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    fn body(&self, req: &ChunkRequest) -> Value {
        let mut body = json!({
            "prompt": req.prompt_text,
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
            "top_p": req.top_p,
            "min_p": req.min_p,
            "top_k": req.top_k.map_or(-1, |k| k as i64),
            "logprobs": req.top_logprobs,
            "stop": req.stop_sequences,
        });
        if let Some(model) = &self.cfg.model {
            body["model"] = json!(model);
        }
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, body: &Value, top_logprobs: usize) -> Result<ChunkResponse, Attempt> {
        let mut rb = self.client.post(self.cfg.url()).json(body);
        if let Some(key) = &self.cfg.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(|e| {
            if e.is_builder() {
                Attempt::Fatal(BackendError::Config(format!("invalid request: {e}")))
            } else {
                Attempt::Retry(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Attempt::Retry(format!("reading body: {e}")))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Retry(format!("HTTP {status}: {}", excerpt(&text))));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(BackendError::Config(format!(
                "HTTP {status} from {}: {}",
                self.cfg.url(),
                excerpt(&text)
            ))));
        }
        parse_completion(&text, top_logprobs).map_err(Attempt::Fatal)
    }

    pub fn http_next_chunk(&self, req: &ChunkRequest) -> Result<ChunkResponse, BackendError> {
        req.validate()?;
        let body = self.body(req);
        let _permit = self.limiter.acquire();
        let max = self.cfg.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=max {
            match self.attempt(&body, req.top_logprobs) {
                Ok(mut r) => {
                    r.attempts = attempt;
                    return Ok(r);
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    tracing::debug!(attempt, error = %msg, "transient backend failure");
                    last = msg;
                    if attempt < max {
                        let factor = 2u32.saturating_pow(attempt - 1);
                        let wait = self.cfg.backoff_base.saturating_mul(factor).min(self.cfg.backoff_cap);
                        std::thread::sleep(wait);
                    }
                }
            }
        }
        Err(BackendError::Transport { attempts: max, message: last })
    }
}

impl Backend for HttpBackend {
    fn next_chunk(&self, req: &ChunkRequest) -> Result<ChunkResponse, BackendError> {
        self.http_next_chunk(req)
    }
}

/// Parse a legacy completions payload:
/// `choices[0].logprobs.{tokens, token_logprobs, top_logprobs}`.
pub(crate) fn parse_completion(body: &str, top_logprobs: usize) -> Result<ChunkResponse, BackendError> {
    let parse_err = |message: String| BackendError::Parse { message, body_excerpt: excerpt(body) };
    let v: Value = serde_json::from_str(body).map_err(|e| parse_err(format!("invalid JSON: {e}")))?;
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| parse_err("missing choices[0]".into()))?;
    let logprobs = match choice.get("logprobs") {
        Some(l) if !l.is_null() => l,
        _ => {
            return Err(BackendError::Config(
                "endpoint returned no logprobs; it must support top_logprobs on /completions".into(),
            ))
        }
    };
    let tokens = logprobs
        .get("tokens")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err("logprobs.tokens missing".into()))?;
    let top = match logprobs.get("top_logprobs") {
        Some(Value::Array(a)) => a,
        _ => {
            return Err(BackendError::Config(
                "endpoint returned no top_logprobs lists".into(),
            ))
        }
    };
    if top.len() != tokens.len() {
        return Err(parse_err(format!("{} tokens but {} top_logprobs entries", tokens.len(), top.len())));
    }
    let token_lps = logprobs.get("token_logprobs").and_then(Value::as_array);

    let mut out_tokens = Vec::with_capacity(tokens.len());
    let mut out_cands = Vec::with_capacity(tokens.len());
    for (i, t) in tokens.iter().enumerate() {
        let text = t.as_str().ok_or_else(|| parse_err(format!("tokens[{i}] is not a string")))?;
        let tok = Token::text(text);
        let mut cands = Vec::new();
        match &top[i] {
            Value::Object(map) => {
                for (k, lp) in map {
                    let lp = lp
                        .as_f64()
                        .ok_or_else(|| parse_err(format!("top_logprobs[{i}][{k:?}] is not a number")))?;
                    cands.push(Candidate::new(Token::text(k.clone()), lp));
                }
            }
            Value::Null => {}
            _ => return Err(parse_err(format!("top_logprobs[{i}] is not an object"))),
        }
        if !cands.iter().any(|c| c.token.same(&tok)) {
            if let Some(lp) = token_lps.and_then(|a| a.get(i)).and_then(Value::as_f64) {
                cands.push(Candidate::new(tok.clone(), lp));
            }
        }
        out_tokens.push(tok);
        out_cands.push(cands);
    }
    let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("stop") => FinishReason::Stop,
        Some("eos") => FinishReason::Eos,
        _ => FinishReason::Length,
    };
    Ok(ChunkResponse { tokens: out_tokens, candidates: out_cands, finish_reason, attempts: 1 }
        .normalized(top_logprobs))
}
