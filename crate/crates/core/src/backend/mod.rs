//! Sources of "next chunk with top-logprob candidates".
//!
//! [`MockModel`] is a deterministic in-process table model for tests and
//! desk-scale experiments; [`HttpBackend`] talks to an OpenAI-compatible
//! `/v1/completions` endpoint that returns `top_logprobs`.

mod http;
mod mock;

pub use http::{EndpointConfig, HttpBackend};
pub use mock::{ContextRule, MockModel, MockModelSpec, MockSpecError};

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

/// A token as seen by the sampler. Completion APIs expose text, so `id` is
/// optional; two tokens are the same token when their texts are equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<TokenId>,
}

impl Token {
    pub fn new(text: impl Into<String>, id: Option<TokenId>) -> Self {
        Self { text: text.into(), id }
    }

    pub fn text(text: impl Into<String>) -> Self {
        Self { text: text.into(), id: None }
    }

    pub fn same(&self, other: &Token) -> bool {
        self.text == other.text
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub token: Token,
    pub logprob: f64,
}

impl Candidate {
    pub fn new(token: Token, logprob: f64) -> Self {
        Self { token, logprob }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRequest {
    pub prompt_text: String,
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
    /// `None` disables top-k.
    pub top_k: Option<usize>,
    pub min_p: f64,
    pub top_logprobs: usize,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ChunkRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if self.top_logprobs < 2 {
            return Err(BackendError::InvalidRequest("top_logprobs must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Length,
    Stop,
    Eos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkResponse {
    pub tokens: Vec<Token>,
    /// Per position, sorted by logprob descending.
    pub candidates: Vec<Vec<Candidate>>,
    pub finish_reason: FinishReason,
    /// Number of transport attempts it took to obtain this response.
    #[serde(default = "one")]
    pub attempts: u32,
}

fn one() -> u32 {
    1
}

impl ChunkResponse {
    /// Enforce the candidate-list invariants: logprobs clamped to `<= 0`,
    /// sorted descending (stable), at most `top_logprobs` entries, and the
    /// emitted token present at its position. Idempotent.
    pub fn normalized(mut self, top_logprobs: usize) -> Self {
        let limit = top_logprobs.max(1);
        for (tok, cands) in self.tokens.iter().zip(self.candidates.iter_mut()) {
            let mut seen = std::collections::HashSet::new();
            cands.retain(|c| seen.insert(c.token.text.clone()));
            for c in cands.iter_mut() {
                if c.logprob.is_nan() {
                    c.logprob = f64::NEG_INFINITY;
                }
                c.logprob = c.logprob.min(0.0);
                if c.token.same(tok) && c.token.id.is_none() {
                    c.token.id = tok.id;
                }
            }
            cands.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
            let pos = cands.iter().position(|c| c.token.same(tok));
            match pos {
                Some(p) if p >= limit => {
                    let emitted = cands.remove(p);
                    cands.truncate(limit - 1);
                    cands.push(emitted);
                }
                Some(_) => cands.truncate(limit),
                None => {
                    // Emitted token missing from its list: keep it with the
                    // lowest listed logprob so ordering stays valid.
                    let lp = cands.last().map_or(0.0, |c| c.logprob);
                    cands.truncate(limit - 1);
                    cands.push(Candidate::new(tok.clone(), lp));
                }
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.tokens.len() != self.candidates.len() {
            return Err(BackendError::Parse {
                message: format!(
                    "{} tokens but {} candidate lists",
                    self.tokens.len(),
                    self.candidates.len()
                ),
                body_excerpt: String::new(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend configuration error: {0}")]
    Config(String),
    #[error("malformed backend payload: {message}; body: {body_excerpt}")]
    Parse { message: String, body_excerpt: String },
    #[error("invalid chunk request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, BackendError::Transport { .. })
    }
}

/// Anything that can extend a prompt by one chunk with candidate lists.
pub trait Backend: Send + Sync {
    fn next_chunk(&self, req: &ChunkRequest) -> Result<ChunkResponse, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn next_chunk(&self, req: &ChunkRequest) -> Result<ChunkResponse, BackendError> {
        (**self).next_chunk(req)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn next_chunk(&self, req: &ChunkRequest) -> Result<ChunkResponse, BackendError> {
        (**self).next_chunk(req)
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn next_chunk(&self, req: &ChunkRequest) -> Result<ChunkResponse, BackendError> {
        (**self).next_chunk(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(t: &str, lp: f64) -> Candidate {
        Candidate::new(Token::text(t), lp)
    }

    #[test]
    fn normalization_sorts_clamps_and_includes_emitted() {
        let r = ChunkResponse {
            tokens: vec![Token::text("z")],
            candidates: vec![vec![c("a", -2.0), c("b", 0.1), c("c", -1.0)]],
            finish_reason: FinishReason::Length,
            attempts: 1,
        }
        .normalized(3);
        let texts: Vec<&str> = r.candidates[0].iter().map(|c| c.token.text.as_str()).collect();
        assert_eq!(texts, vec!["b", "c", "z"]);
        assert_eq!(r.candidates[0][0].logprob, 0.0);
        assert_eq!(r.clone().normalized(3), r);
    }

    #[test]
    fn emitted_token_survives_truncation() {
        let r = ChunkResponse {
            tokens: vec![Token::text("d")],
            candidates: vec![vec![c("a", -0.1), c("b", -0.2), c("c", -0.3), c("d", -0.4)]],
            finish_reason: FinishReason::Length,
            attempts: 1,
        }
        .normalized(2);
        let texts: Vec<&str> = r.candidates[0].iter().map(|c| c.token.text.as_str()).collect();
        assert_eq!(texts, vec!["a", "d"]);
    }

    #[test]
    fn request_validation() {
        let mut req = ChunkRequest {
            prompt_text: String::new(),
            max_tokens: 1,
            temperature: 1.0,
            top_p: 1.0,
            top_k: None,
            min_p: 0.0,
            top_logprobs: 2,
            stop_sequences: vec![],
            seed: None,
        };
        assert!(req.validate().is_ok());
        req.top_logprobs = 1;
        assert!(req.validate().is_err());
    }
}
