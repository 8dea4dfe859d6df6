use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, Candidate, ChunkRequest, ChunkResponse, FinishReason, Token, TokenId};
use crate::sampler::dist::{self, Dist, SamplingParams};

#[derive(Debug, thiserror::Error)]
pub enum MockSpecError {
    #[error("mock spec: token `{0}` is not in the vocabulary")]
    UnknownToken(String),
    #[error("mock spec: distribution for {context} sums to {sum}, expected 1")]
    NotNormalized { context: String, sum: f64 },
    #[error("mock spec: distribution for {0} needs at least 2 candidates")]
    TooFewCandidates(String),
    #[error("mock spec: non-positive probability for `{token}` in {context}")]
    NonPositive { context: String, token: String },
    #[error("mock spec: duplicate vocabulary entry `{0}`")]
    DuplicateToken(String),
    #[error("mock spec {path}: {message}")]
    Load { path: String, message: String },
}

/// Next-token distribution used when the generated text ends with `suffix`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRule {
    pub suffix: String,
    pub candidates: Vec<(String, f64)>,
}

/// A table-driven language model. The longest matching context suffix
/// wins; otherwise `default` applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockModelSpec {
    pub vocabulary: Vec<String>,
    #[serde(default)]
    pub contexts: Vec<ContextRule>,
    pub default: Vec<(String, f64)>,
}

impl MockModelSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, MockSpecError> {
        let path = path.as_ref();
        let load_err = |message: String| MockSpecError::Load { path: path.display().to_string(), message };
        let raw = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        serde_json::from_str(&raw).map_err(|e| load_err(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), MockSpecError> {
        let mut seen = std::collections::HashSet::new();
        for t in &self.vocabulary {
            if !seen.insert(t.as_str()) {
                return Err(MockSpecError::DuplicateToken(t.clone()));
            }
        }
        let check = |context: &str, cands: &[(String, f64)]| -> Result<(), MockSpecError> {
            if cands.len() < 2 {
                return Err(MockSpecError::TooFewCandidates(context.to_string()));
            }
            for (t, p) in cands {
                if !seen.contains(t.as_str()) {
                    return Err(MockSpecError::UnknownToken(t.clone()));
                }
                if !(*p > 0.0) {
                    return Err(MockSpecError::NonPositive { context: context.to_string(), token: t.clone() });
                }
            }
            let sum: f64 = cands.iter().map(|(_, p)| p).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(MockSpecError::NotNormalized { context: context.to_string(), sum });
            }
            Ok(())
        };
        check("default", &self.default)?;
        for rule in &self.contexts {
            check(&format!("context {:?}", rule.suffix), &rule.candidates)?;
        }
        Ok(())
    }
}

type IdDist = Vec<(TokenId, f64)>;

/// Compiled [`MockModelSpec`].
#[derive(Debug, Clone)]
pub struct MockModel {
    spec: MockModelSpec,
    vocab_index: HashMap<String, TokenId>,
    /// Sorted by suffix length, longest first.
    rules: Vec<(String, IdDist)>,
    default: IdDist,
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl MockModel {
    pub fn new(spec: MockModelSpec) -> Result<Self, MockSpecError> {
        spec.validate()?;
        let vocab_index: HashMap<String, TokenId> = spec
            .vocabulary
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        let to_ids = |cands: &[(String, f64)]| -> IdDist {
            let mut v: IdDist = cands.iter().map(|(t, p)| (vocab_index[t], *p)).collect();
            v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            v
        };
        let mut rules: Vec<(String, IdDist)> = spec
            .contexts
            .iter()
            .map(|r| (r.suffix.clone(), to_ids(&r.candidates)))
            .collect();
        rules.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
        let default = to_ids(&spec.default);
        Ok(Self { spec, vocab_index, rules, default })
    }

    pub fn spec(&self) -> &MockModelSpec {
        &self.spec
    }

    pub fn vocab_size(&self) -> usize {
        self.spec.vocabulary.len()
    }

    pub fn token_id(&self, text: &str) -> Option<TokenId> {
        self.vocab_index.get(text).copied()
    }

    pub fn token(&self, id: TokenId) -> Token {
        Token::new(self.spec.vocabulary[id as usize].clone(), Some(id))
    }

    /// Next-token distribution after `context`, sorted by probability.
    pub fn distribution(&self, context: &str) -> Vec<(Token, f64)> {
        self.id_distribution(context)
            .iter()
            .map(|&(id, p)| (self.token(id), p))
            .collect()
    }

    fn id_distribution(&self, context: &str) -> &IdDist {
        self.rules
            .iter()
            .find(|(suffix, _)| context.ends_with(suffix.as_str()))
            .map_or(&self.default, |(_, d)| d)
    }

    /// Full-vocabulary log-probabilities after `context`; tokens outside the
    /// active distribution get `floor`.
    pub fn logits(&self, context: &str, floor: f64) -> Vec<f64> {
        let mut y = vec![floor; self.vocab_size()];
        for &(id, p) in self.id_distribution(context) {
            y[id as usize] = p.ln();
        }
        y
    }

    /// Deterministic in (spec, seed, prompt).
    pub fn mock_next_chunk(&self, req: &ChunkRequest) -> ChunkResponse {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(req.seed.unwrap_or(0), req.prompt_text.as_bytes()));
        let params = SamplingParams {
            temperature: req.temperature,
            min_p: req.min_p,
            top_p: req.top_p,
            top_k: req.top_k,
        };
        let mut context = req.prompt_text.clone();
        let start = context.len();
        let mut tokens = Vec::with_capacity(req.max_tokens);
        let mut candidates = Vec::with_capacity(req.max_tokens);
        let mut finish = FinishReason::Length;
        for _ in 0..req.max_tokens {
            let full = self.distribution(&context);
            let cands: Vec<Candidate> = full
                .iter()
                .take(req.top_logprobs)
                .map(|(t, p)| Candidate::new(t.clone(), p.ln()))
                .collect();
            let (samp, _) = dist::filtered(full.clone() as Dist, &params);
            let tok = dist::sample(&samp, &mut rng);
            context.push_str(&tok.text);
            let mut cands = cands;
            if !cands.iter().any(|c| c.token.same(&tok)) {
                let p = full.iter().find(|(t, _)| t.same(&tok)).map_or(0.0, |(_, p)| *p);
                cands.pop();
                cands.push(Candidate::new(tok.clone(), p.ln()));
            }
            tokens.push(tok);
            candidates.push(cands);
            if req.stop_sequences.iter().any(|s| !s.is_empty() && context[start..].contains(s.as_str())) {
                finish = FinishReason::Stop;
                break;
            }
        }
        ChunkResponse { tokens, candidates, finish_reason: finish, attempts: 1 }.normalized(req.top_logprobs)
    }
}

impl Backend for MockModel {
    fn next_chunk(&self, req: &ChunkRequest) -> Result<ChunkResponse, BackendError> {
        req.validate()?;
        Ok(self.mock_next_chunk(req))
    }
}
