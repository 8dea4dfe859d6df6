//! Backtracking generation.
//!
//! Tokens arrive from a [`Backend`] in chunks together with their top-logprob
//! candidate lists. After every chunk the decoded text is scanned; on a
//! violation the trace is rewound to the token where the banned sequence
//! starts, that token is attenuated by `10^(−10·s)` in the cached candidate
//! list, and a replacement is drawn with min-p and the other knobs. When the
//! banned token comes back anyway, the (position, pattern) pair is marked to
//! be ignored from then on.
//!
//! RNG: each generation owns a `ChaCha8Rng` seeded with its seed on
//! stream [`RESAMPLE_STREAM`]; the same seed is forwarded to the backend.
//! [`derive_seed`] splits a base seed into per-prompt seeds.

pub mod dist;
mod trace;

pub use dist::{attenuate, resample_distribution, Dist, LadderStage, Resampled, SamplingParams};
pub use trace::{Rejection, TokenTrace};

use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, ChunkRequest, FinishReason, Token, TokenId};
use crate::pattern::{Banlist, PatternId, Violation};

/// RNG stream used for resampling draws.
pub const RESAMPLE_STREAM: u64 = 1;

/// Per-prompt seed from a run seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index.wrapping_add(2));
    rng.next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// `s` in `[0, 1]`; 1.0 is effectively a hard ban.
    pub ban_strength: f64,
    pub min_p: f64,
    pub temperature: f64,
    pub top_p: f64,
    /// `None` disables top-k.
    pub top_k: Option<usize>,
    pub chunk_size: usize,
    pub top_logprobs_count: usize,
    pub force_backtrack: bool,
    pub max_new_tokens: usize,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    /// Upper bound on backtracking events in one generation.
    #[serde(default = "default_max_backtracks")]
    pub max_backtracks: usize,
}

fn default_max_backtracks() -> usize {
    100_000
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            ban_strength: 1.0,
            min_p: 0.01,
            temperature: 1.0,
            top_p: 1.0,
            top_k: Some(50),
            chunk_size: 20,
            top_logprobs_count: 20,
            force_backtrack: false,
            max_new_tokens: 1000,
            stop_sequences: Vec::new(),
            max_backtracks: default_max_backtracks(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("sampler config: {0}")]
    Invalid(String),
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(0.0..=1.0).contains(&self.ban_strength) {
            return bad("ban_strength must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.min_p) {
            return bad("min_p must be in [0, 1]");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must be in (0, 1]");
        }
        if self.top_k == Some(0) {
            return bad("top_k must be positive (or disabled)");
        }
        if self.chunk_size == 0 {
            return bad("chunk_size must be positive");
        }
        if self.top_logprobs_count < 2 {
            return bad("top_logprobs_count must be >= 2");
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive");
        }
        Ok(())
    }

    pub fn sampling_params(&self) -> SamplingParams {
        SamplingParams {
            temperature: self.temperature,
            min_p: self.min_p,
            top_p: self.top_p,
            top_k: self.top_k,
        }
    }
}

/// One backtracking event.
#[derive(Debug, Clone, PartialEq)]
pub struct BacktrackEvent {
    pub position: usize,
    pub rejected_token: Token,
    /// min-p survivors at this position, without the rejected token.
    pub chosen_candidates: Vec<Token>,
    pub resampled_token: Token,
    pub pattern_id: PatternId,
    pub pattern: String,
    /// The resampled token was itself already rejected here.
    pub let_through: bool,
    /// Generated text before `position` at the time of the event.
    pub prefix: String,
}

/// JSON-lines record for one [`BacktrackEvent`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub generation_id: String,
    pub position: usize,
    pub rejected_token_id: Option<TokenId>,
    pub rejected_text: String,
    pub chosen_token_ids: Vec<Option<TokenId>>,
    pub chosen_texts: Vec<String>,
    pub resampled_token_id: Option<TokenId>,
    pub resampled_text: String,
    pub pattern: String,
    pub let_through: bool,
    pub prefix: String,
}

impl BacktrackEvent {
    pub fn to_record(&self, generation_id: &str) -> EventRecord {
        EventRecord {
            generation_id: generation_id.to_string(),
            position: self.position,
            rejected_token_id: self.rejected_token.id,
            rejected_text: self.rejected_token.text.clone(),
            chosen_token_ids: self.chosen_candidates.iter().map(|t| t.id).collect(),
            chosen_texts: self.chosen_candidates.iter().map(|t| t.text.clone()).collect(),
            resampled_token_id: self.resampled_token.id,
            resampled_text: self.resampled_token.text.clone(),
            pattern: self.pattern.clone(),
            let_through: self.let_through,
            prefix: self.prefix.clone(),
        }
    }
}

impl EventRecord {
    /// Rebuild an event; the pattern id is not stored in the log, so it is
    /// reported as phrase #0 and only `pattern` text is meaningful.
    pub fn to_event(&self) -> BacktrackEvent {
        BacktrackEvent {
            position: self.position,
            rejected_token: Token::new(self.rejected_text.clone(), self.rejected_token_id),
            chosen_candidates: self
                .chosen_texts
                .iter()
                .zip(self.chosen_token_ids.iter().chain(std::iter::repeat(&None)))
                .map(|(t, id)| Token::new(t.clone(), *id))
                .collect(),
            resampled_token: Token::new(self.resampled_text.clone(), self.resampled_token_id),
            pattern_id: PatternId::phrase(0),
            pattern: self.pattern.clone(),
            let_through: self.let_through,
            prefix: self.prefix.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub tokens_kept: usize,
    /// Tokens received from the backend.
    pub tokens_generated: usize,
    /// Tokens drawn locally from cached candidates after a backtrack.
    pub tokens_resampled: usize,
    pub tokens_discarded: usize,
    pub backtracks: usize,
    pub lets_through: usize,
    pub backend_calls: usize,
    pub elapsed_ms: u64,
}

impl GenerationStats {
    /// Kept tokens per token of work (backend + local draws).
    pub fn efficiency(&self) -> f64 {
        let work = self.tokens_generated + self.tokens_resampled;
        if work == 0 {
            1.0
        } else {
            self.tokens_kept as f64 / work as f64
        }
    }

    pub fn accumulate(&mut self, other: &GenerationStats) {
        self.tokens_kept += other.tokens_kept;
        self.tokens_generated += other.tokens_generated;
        self.tokens_resampled += other.tokens_resampled;
        self.tokens_discarded += other.tokens_discarded;
        self.backtracks += other.backtracks;
        self.lets_through += other.lets_through;
        self.backend_calls += other.backend_calls;
        self.elapsed_ms += other.elapsed_ms;
    }
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub text: String,
    pub events: Vec<BacktrackEvent>,
    pub stats: GenerationStats,
    pub trace: TokenTrace,
}

#[derive(Debug, thiserror::Error)]
pub enum GenerateError {
    #[error("backend failed at token position {position}: {source}")]
    Backend {
        position: usize,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("trace integrity violated: {0}")]
    Internal(String),
    #[error("backtracking budget of {0} events exhausted")]
    BacktrackBudget(usize),
}

impl GenerateError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, GenerateError::Backend { source, .. } if source.is_retriable())
    }
}

/// Scan the trace's text, honoring its ignore marks.
pub fn detect_after_chunk(trace: &TokenTrace, banlist: &Banlist) -> Option<Violation> {
    banlist.scan(trace.text(), trace.spans(), trace.ignore_marks())
}

/// Generate up to `config.max_new_tokens` tokens after `prompt` while
/// suppressing `banlist`.
///
/// With `ban_strength == 0` and no forced backtracking the banlist has no
/// effect and detection is skipped, so output equals unconstrained sampling.
pub fn generate<B: Backend + ?Sized>(
    backend: &B,
    prompt: &str,
    banlist: &Banlist,
    config: &SamplerConfig,
    rng_seed: u64,
) -> Result<Generation, GenerateError> {
    config.validate()?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.set_stream(RESAMPLE_STREAM);
    let params = config.sampling_params();
    let suppress = !banlist.is_empty() && (config.ban_strength > 0.0 || config.force_backtrack);

    let mut trace = TokenTrace::new();
    let mut events = Vec::new();
    let mut stats = GenerationStats::default();
    let mut finished = false;

    loop {
        if suppress {
            while let Some(v) = detect_after_chunk(&trace, banlist) {
                if stats.backtracks >= config.max_backtracks {
                    return Err(GenerateError::BacktrackBudget(config.max_backtracks));
                }
                let event = backtrack(&mut trace, &v, banlist, config, &params, &mut rng, &mut stats)?;
                events.push(event);
                finished = false;
            }
        }
        if finished || trace.len() >= config.max_new_tokens {
            break;
        }

        let req = ChunkRequest {
            prompt_text: format!("{prompt}{}", trace.text()),
            max_tokens: config.chunk_size.min(config.max_new_tokens - trace.len()),
            temperature: config.temperature,
            top_p: config.top_p,
            top_k: config.top_k,
            min_p: config.min_p,
            top_logprobs: config.top_logprobs_count,
            stop_sequences: config.stop_sequences.clone(),
            seed: Some(rng_seed),
        };
        let resp = backend
            .next_chunk(&req)
            .and_then(|r| r.validate().map(|_| r))
            .map_err(|source| GenerateError::Backend { position: trace.len(), source })?;
        stats.backend_calls += 1;
        stats.tokens_generated += resp.tokens.len();
        let got = resp.tokens.len();
        for (tok, cands) in resp.tokens.into_iter().zip(resp.candidates) {
            let cands: Dist = cands.into_iter().map(|c| (c.token, c.logprob.exp())).collect();
            trace.push(tok, cands);
        }
        if trace.len() > config.max_new_tokens {
            let extra = trace.len() - config.max_new_tokens;
            stats.tokens_discarded += extra;
            trace.rewind_to(config.max_new_tokens);
        }
        if resp.finish_reason != FinishReason::Length || got == 0 {
            finished = true;
        }
        if apply_stop_sequences(&mut trace, &config.stop_sequences, &mut stats) {
            finished = true;
        }
        trace.check_integrity().map_err(GenerateError::Internal)?;
    }

    stats.tokens_kept = trace.len();
    stats.elapsed_ms = started.elapsed().as_millis() as u64;
    Ok(Generation { text: trace.text().to_string(), events, stats, trace })
}

fn apply_stop_sequences(trace: &mut TokenTrace, stops: &[String], stats: &mut GenerationStats) -> bool {
    let text = trace.text();
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min();
    let Some(byte) = cut else { return false };
    let char_pos = text[..byte].chars().count();
    let keep = trace.spans().partition_point(|s| s.end <= char_pos);
    stats.tokens_discarded += trace.len() - keep;
    trace.rewind_to(keep);
    true
}

fn backtrack(
    trace: &mut TokenTrace,
    v: &Violation,
    banlist: &Banlist,
    config: &SamplerConfig,
    params: &SamplingParams,
    rng: &mut ChaCha8Rng,
    stats: &mut GenerationStats,
) -> Result<BacktrackEvent, GenerateError> {
    let k = v.start_token_index;
    if k >= trace.len() {
        return Err(GenerateError::Internal(format!(
            "violation starts at token {k} but trace has {} tokens",
            trace.len()
        )));
    }
    let rejected = trace.tokens()[k].clone();
    let cands = trace.candidates()[k].clone();
    let prefix: String = trace.text_before(k).to_string();

    stats.tokens_discarded += trace.len() - k;
    trace.rewind_to(k);
    trace.record_rejection(k, &rejected, v.pattern_id);

    let penalties = trace.penalties(k);
    let res = dist::resample_penalized(&cands, &penalties, config.ban_strength, params, config.force_backtrack);
    let pick = dist::sample(&res.dist, rng);
    let let_through = penalties.iter().any(|p| p.token.same(&pick));
    if let_through {
        trace.mark_let_through(k, &pick);
        stats.lets_through += 1;
    }
    let chosen: Vec<Token> = res
        .survivors
        .iter()
        .filter(|(t, _)| !t.same(&rejected))
        .map(|(t, _)| t.clone())
        .collect();
    trace.push(pick.clone(), cands);
    stats.backtracks += 1;
    stats.tokens_resampled += 1;

    Ok(BacktrackEvent {
        position: k,
        rejected_token: rejected,
        chosen_candidates: chosen,
        resampled_token: pick,
        pattern_id: v.pattern_id,
        pattern: banlist.describe(v.pattern_id),
        let_through,
        prefix,
    })
}

/// One prompt of a batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptItem {
    pub id: String,
    pub prompt: String,
}

/// Generate for many prompts on a bounded worker pool. Results come back in
/// input order; prompt `i` uses `derive_seed(base_seed, i)`.
pub fn generate_batch<B: Backend + ?Sized>(
    backend: &B,
    prompts: &[PromptItem],
    banlist: &Banlist,
    config: &SamplerConfig,
    base_seed: u64,
    threads: usize,
) -> Vec<Result<Generation, GenerateError>> {
    let run = || {
        prompts
            .par_iter()
            .enumerate()
            .map(|(i, p)| generate(backend, &p.prompt, banlist, config, derive_seed(base_seed, i as u64)))
            .collect()
    };
    match rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    }
}

/// Distinct (position, pattern, rejected token) triples never repeat within
/// one generation; used by tests as a loop-freedom check.
pub fn events_are_loop_free(events: &[BacktrackEvent]) -> bool {
    // A later rewind to an earlier position legitimately revisits positions,
    // so uniqueness is checked between consecutive rewinds past each point.
    let mut live: Vec<(usize, PatternId, String)> = Vec::new();
    for e in events {
        live.retain(|(p, _, _)| *p <= e.position);
        let key = (e.position, e.pattern_id, e.rejected_token.text.clone());
        if live.contains(&key) {
            return false;
        }
        live.push(key);
    }
    true
}

#[cfg(test)]
mod tests;
