//! Training samples captured from backtracking events.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::Token;
use crate::pattern::Banlist;
use crate::sampler::BacktrackEvent;
use crate::text;

pub const DEFAULT_MIN_CHOSEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSource {
    pub pattern: String,
    pub generation_id: String,
    pub position: usize,
}

/// One rejected continuation token against its viable alternatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FtpoSample {
    pub prompt_text: String,
    pub rejected: Token,
    pub chosen: Vec<Token>,
    pub source: SampleSource,
}

impl FtpoSample {
    /// `rejected ∉ chosen`, chosen non-empty and distinct.
    pub fn check(&self) -> Result<(), String> {
        if self.chosen.is_empty() {
            return Err("chosen is empty".into());
        }
        if self.chosen.iter().any(|c| c.same(&self.rejected)) {
            return Err(format!("rejected token {:?} is also chosen", self.rejected.text));
        }
        let mut seen = HashSet::new();
        for c in &self.chosen {
            if !seen.insert(c.text.as_str()) {
                return Err(format!("chosen token {:?} appears twice", c.text));
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}:{line}: {message}")]
    Line { path: String, line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("regularisation strength {0} outside [0, 1]")]
    Strength(f64),
}

fn starts_word(prefix: &str, token: &str) -> bool {
    token.chars().next().is_some_and(|c| !text::is_word_char(c))
        || prefix.chars().last().is_none_or(|c| !text::is_word_char(c))
}

/// Whether `token` after `prefix` completes or opens a banned sequence.
pub fn begins_banned(banlist: &Banlist, prefix: &str, token: &Token) -> bool {
    let joined = format!("{prefix}{}", token.text);
    let cut = prefix.chars().count();
    if banlist.find_all(&joined).iter().any(|(_, span)| span.end > cut) {
        return true;
    }
    starts_word(prefix, &token.text) && banlist.token_opens_phrase(&token.text)
}

/// Sample for one event, or `None` for let-throughs and events left with
/// fewer than `min_chosen` clean alternatives.
pub fn capture_sample(
    event: &BacktrackEvent,
    prompt: &str,
    generation_id: &str,
    banlist: &Banlist,
    min_chosen: usize,
) -> Option<FtpoSample> {
    if event.let_through {
        return None;
    }
    let mut seen = HashSet::new();
    let chosen: Vec<Token> = event
        .chosen_candidates
        .iter()
        .filter(|c| !c.same(&event.rejected_token))
        .filter(|c| seen.insert(c.text.clone()))
        .filter(|c| !begins_banned(banlist, &event.prefix, c))
        .cloned()
        .collect();
    if chosen.len() < min_chosen.max(1) {
        return None;
    }
    Some(FtpoSample {
        prompt_text: format!("{prompt}{}", event.prefix),
        rejected: event.rejected_token.clone(),
        chosen,
        source: SampleSource {
            pattern: event.pattern.clone(),
            generation_id: generation_id.to_string(),
            position: event.position,
        },
    })
}

/// Downsample over-represented rejections, then samples whose chosen sets
/// lean on globally frequent tokens.
///
/// A rejected-token group of size `n`, with smallest group `n_min`, keeps
/// each member with probability `(n_min / n)^rejected_strength`. A sample
/// whose chosen tokens have mean dataset frequency `f` keeps with
/// probability `(f_min / f)^chosen_strength`. Strength 0 keeps everything;
/// strength 1 equalizes expected group sizes. One uniform draw per sample
/// per pass, in input order, so kept sets shrink monotonically with strength.
pub fn regularize_dataset(
    samples: &[FtpoSample],
    rejected_strength: f64,
    chosen_strength: f64,
    seed: u64,
) -> Result<Vec<FtpoSample>, DatasetError> {
    for s in [rejected_strength, chosen_strength] {
        if !(0.0..=1.0).contains(&s) {
            return Err(DatasetError::Strength(s));
        }
    }
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u_rej: Vec<f64> = (0..samples.len()).map(|_| rng.random::<f64>()).collect();
    let u_cho: Vec<f64> = (0..samples.len()).map(|_| rng.random::<f64>()).collect();

    let mut group: BTreeMap<&str, usize> = BTreeMap::new();
    for s in samples {
        *group.entry(s.rejected.text.as_str()).or_insert(0) += 1;
    }
    let n_min = *group.values().min().unwrap_or(&1) as f64;
    let kept: Vec<usize> = (0..samples.len())
        .filter(|&i| {
            let n = group[samples[i].rejected.text.as_str()] as f64;
            rejected_strength == 0.0 || u_rej[i] < (n_min / n).powf(rejected_strength)
        })
        .collect();

    let mut freq: HashMap<&str, usize> = HashMap::new();
    for s in samples {
        for c in &s.chosen {
            *freq.entry(c.text.as_str()).or_insert(0) += 1;
        }
    }
    let mean_freq = |s: &FtpoSample| -> f64 {
        s.chosen.iter().map(|c| freq[c.text.as_str()] as f64).sum::<f64>() / s.chosen.len().max(1) as f64
    };
    let f_min = samples.iter().map(mean_freq).fold(f64::INFINITY, f64::min);
    Ok(kept
        .into_iter()
        .filter(|&i| chosen_strength == 0.0 || u_cho[i] < (f_min / mean_freq(&samples[i])).powf(chosen_strength))
        .map(|i| samples[i].clone())
        .collect())
}

pub fn write_dataset(samples: &[FtpoSample], path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let io = |source| DatasetError::Io { path: path.display().to_string(), source };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for s in samples {
        serde_json::to_writer(&mut w, s).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Parse JSON lines, rejecting any line that breaks the sample invariants.
pub fn parse_dataset(reader: impl BufRead, source: &str) -> Result<Vec<FtpoSample>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DatasetError::Io { path: source.to_string(), source: e })?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| DatasetError::Line { path: source.to_string(), line: i + 1, message };
        let s: FtpoSample = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        s.check().map_err(bad)?;
        out.push(s);
    }
    Ok(out)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<FtpoSample>, DatasetError> {
    let path = path.as_ref();
    let f = std::fs::File::open(path)
        .map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
    parse_dataset(std::io::BufReader::new(f), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pattern::{compile_banlist, PatternId};

    fn toks(x: &[&str]) -> Vec<Token> {
        x.iter().map(|t| Token::text(*t)).collect()
    }

    fn event(chosen: &[&str]) -> BacktrackEvent {
        BacktrackEvent {
            position: 5,
            rejected_token: Token::text(" Elara"),
            chosen_candidates: toks(chosen),
            resampled_token: Token::text(chosen[0]),
            pattern_id: PatternId::phrase(0),
            pattern: "elara".into(),
            let_through: false,
            prefix: " Princess".into(),
        }
    }

    fn ban(p: &[&str]) -> Banlist {
        let v: Vec<String> = p.iter().map(|s| s.to_string()).collect();
        compile_banlist(&v, &[], &[], &[], 3).unwrap()
    }

    #[test]
    fn princess_sample() {
        let e = event(&[" Madelyne", " Nadia", " Freya", " Isolde"]);
        let s = capture_sample(&e, "Once upon a time,", "g", &ban(&["elara"]), 4).unwrap();
        assert_eq!(s.prompt_text, "Once upon a time, Princess");
        assert_eq!(s.rejected.text, " Elara");
        assert_eq!(s.chosen.len(), 4);
    }

    #[test]
    fn too_few_survivors() {
        let e = event(&[" Nadia", " Freya", " Isolde"]);
        assert!(capture_sample(&e, "", "g", &ban(&["elara"]), 4).is_none());
    }

    #[test]
    fn survivor_starting_other_ban_is_dropped() {
        let e = event(&[" Nadia", " Freya", " Isolde", " Mad", " Osric"]);
        let s = capture_sample(&e, "", "g", &ban(&["elara", "nadia", "madelyne"]), 3).unwrap();
        assert_eq!(s.chosen, toks(&[" Freya", " Isolde", " Osric"]));
    }

    #[test]
    fn let_through_yields_nothing() {
        let mut e = event(&[" Nadia", " Freya", " Isolde", " Osric"]);
        e.let_through = true;
        assert!(capture_sample(&e, "", "g", &ban(&["elara"]), 1).is_none());
    }

    #[test]
    fn bad_line_reports_number() {
        let good = r#"{"prompt_text":"p","rejected":{"text":"a"},"chosen":[{"text":"b"}],"source":{"pattern":"a","generation_id":"g","position":0}}"#;
        let bad = r#"{"prompt_text":"p","rejected":{"text":"a"},"chosen":[{"text":"a"}],"source":{"pattern":"a","generation_id":"g","position":0}}"#;
        let src = format!("{good}\n{bad}\n");
        match parse_dataset(src.as_bytes(), "d") {
            Err(DatasetError::Line { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
