//! Banlist compilation and violation scanning.
//!
//! Three pattern families share one id space keyed by [`PatternId`]:
//!
//! * literal phrases, matched case-insensitively with word-boundary rules,
//! * stopword-stripped n-grams (2 or 3 words), matched on the content-word
//!   stream and mapped back to the surface span,
//! * regular expressions, compiled individually and as one alternation.
//!
//! A phrase only matches when no word character touches it on either side,
//! unless the phrase itself starts (or ends) with a non-word character on
//! that side. So `cat` does not fire inside `cation`, while `cat[` fires on
//! `cat[morecat]`.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::ops::Range;
use std::path::Path;

use aho_corasick::{AhoCorasick, MatchKind};
use serde::{Deserialize, Serialize};

use crate::text::{self, CharIndex};

#[derive(Debug, thiserror::Error)]
pub enum BanlistError {
    #[error("invalid regex pattern #{index} `{pattern}`: {message}")]
    InvalidRegex {
        index: usize,
        pattern: String,
        message: String,
    },
    #[error("empty phrase at index {0}")]
    EmptyPhrase(usize),
    #[error("n-gram {ngram:?} must have 2 or 3 words")]
    NgramArity { ngram: Vec<String> },
    #[error("n-gram {ngram:?} contains stopword `{word}`")]
    NgramStopword { ngram: Vec<String>, word: String },
    #[error("n-gram {ngram:?} contains word `{word}` shorter than {min_word_len} chars")]
    NgramShortWord {
        ngram: Vec<String>,
        word: String,
        min_word_len: usize,
    },
    #[error("failed to build phrase matcher: {0}")]
    Matcher(String),
    #[error("banlist file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("banlist file {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("char position {pos} is outside the decoded text (length {len})")]
pub struct OutOfRange {
    pub pos: usize,
    pub len: usize,
}

/// Pattern family; the derived order is the tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternKind {
    Phrase,
    Ngram,
    Regex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatternId {
    pub kind: PatternKind,
    pub index: usize,
}

impl PatternId {
    pub fn phrase(index: usize) -> Self {
        Self { kind: PatternKind::Phrase, index }
    }
    pub fn ngram(index: usize) -> Self {
        Self { kind: PatternKind::Ngram, index }
    }
    pub fn regex(index: usize) -> Self {
        Self { kind: PatternKind::Regex, index }
    }
}

impl fmt::Display for PatternId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            PatternKind::Phrase => "phrase",
            PatternKind::Ngram => "ngram",
            PatternKind::Regex => "regex",
        };
        write!(f, "{k}#{}", self.index)
    }
}

/// A banned match in decoded text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub pattern_id: PatternId,
    /// Half-open char interval.
    pub char_span: Range<usize>,
    /// Token whose decoded span contains `char_span.start`.
    pub start_token_index: usize,
}

impl Violation {
    pub fn kind(&self) -> PatternKind {
        self.pattern_id.kind
    }
}

/// On-disk banlist document.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanlistFile {
    #[serde(default)]
    pub slop_phrases: Vec<String>,
    #[serde(default)]
    pub ngrams: Vec<Vec<String>>,
    #[serde(default)]
    pub regex_patterns: Vec<String>,
    #[serde(default)]
    pub whitelist: Vec<String>,
}

const NOT_X_BUT_Y: &str = include_str!("../data/not_x_but_y.json");

impl BanlistFile {
    /// Bundled regexes for "not X, but Y" style contrast constructions.
    pub fn not_x_but_y() -> Self {
        serde_json::from_str(NOT_X_BUT_Y).expect("bundled regex banlist parses")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BanlistError> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|source| BanlistError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&raw).map_err(|source| BanlistError::Json {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BanlistError> {
        let path = path.as_ref();
        let mut raw = serde_json::to_string_pretty(self).expect("banlist serializes");
        raw.push('\n');
        std::fs::write(path, raw).map_err(|source| BanlistError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn compile(&self, min_word_len: usize) -> Result<Banlist, BanlistError> {
        compile_banlist(
            &self.slop_phrases,
            &self.ngrams,
            &self.regex_patterns,
            &self.whitelist,
            min_word_len,
        )
    }

    pub fn is_empty(&self) -> bool {
        self.slop_phrases.is_empty() && self.ngrams.is_empty() && self.regex_patterns.is_empty()
    }

    /// Append entries from `other` that are not already present.
    pub fn extend_unique(&mut self, other: &BanlistFile) {
        let mut have: HashSet<String> = self.slop_phrases.iter().map(|p| text::fold_case(p)).collect();
        for p in &other.slop_phrases {
            if have.insert(text::fold_case(p)) {
                self.slop_phrases.push(p.clone());
            }
        }
        let mut have_ng: HashSet<Vec<String>> = self.ngrams.iter().map(|g| normalize_ngram(g)).collect();
        for g in &other.ngrams {
            if have_ng.insert(normalize_ngram(g)) {
                self.ngrams.push(g.clone());
            }
        }
        for r in &other.regex_patterns {
            if !self.regex_patterns.contains(r) {
                self.regex_patterns.push(r.clone());
            }
        }
        for w in &other.whitelist {
            if !self.whitelist.contains(w) {
                self.whitelist.push(w.clone());
            }
        }
    }
}

fn normalize_ngram(words: &[String]) -> Vec<String> {
    words
        .iter()
        .flat_map(|w| w.split_whitespace())
        .map(text::fold_case)
        .collect()
}

/// A compiled, immutable banlist. Cheap to share across threads.
#[derive(Debug, Clone)]
pub struct Banlist {
    phrases: Vec<String>,
    ngrams: Vec<Vec<String>>,
    regex_sources: Vec<String>,
    whitelist: BTreeSet<String>,
    min_word_len: usize,
    phrase_matcher: Option<AhoCorasick>,
    ngram_index: HashMap<Vec<String>, usize>,
    regexes: Vec<fancy_regex::Regex>,
    alternation: Option<fancy_regex::Regex>,
}

/// Compile phrases, n-grams, regexes and a whitelist into a [`Banlist`].
///
/// Whitelisted strings are compared case-insensitively against phrases and
/// against the space-joined form of each n-gram; matching entries are dropped.
pub fn compile_banlist(
    phrases: &[String],
    ngrams: &[Vec<String>],
    regex_sources: &[String],
    whitelist: &[String],
    min_word_len: usize,
) -> Result<Banlist, BanlistError> {
    let whitelist: BTreeSet<String> = whitelist.iter().map(|w| text::fold_case(w.trim())).collect();

    let mut seen = HashSet::new();
    let mut kept_phrases = Vec::new();
    for (i, p) in phrases.iter().enumerate() {
        if p.is_empty() {
            return Err(BanlistError::EmptyPhrase(i));
        }
        let folded = text::fold_case(p);
        if whitelist.contains(folded.trim()) || !seen.insert(folded.clone()) {
            continue;
        }
        kept_phrases.push(folded);
    }

    let mut kept_ngrams: Vec<Vec<String>> = Vec::new();
    let mut ngram_index = HashMap::new();
    for raw in ngrams {
        let ngram = normalize_ngram(raw);
        if !(2..=3).contains(&ngram.len()) {
            return Err(BanlistError::NgramArity { ngram });
        }
        for w in &ngram {
            if text::is_stopword(w) {
                return Err(BanlistError::NgramStopword {
                    ngram: ngram.clone(),
                    word: w.clone(),
                });
            }
            if w.chars().count() < min_word_len {
                return Err(BanlistError::NgramShortWord {
                    ngram: ngram.clone(),
                    word: w.clone(),
                    min_word_len,
                });
            }
        }
        if whitelist.contains(&ngram.join(" ")) || ngram_index.contains_key(&ngram) {
            continue;
        }
        ngram_index.insert(ngram.clone(), kept_ngrams.len());
        kept_ngrams.push(ngram);
    }

    let mut regexes = Vec::with_capacity(regex_sources.len());
    for (index, src) in regex_sources.iter().enumerate() {
        let re = fancy_regex::Regex::new(src).map_err(|e| BanlistError::InvalidRegex {
            index,
            pattern: src.clone(),
            message: e.to_string(),
        })?;
        regexes.push(re);
    }
    let alternation = if regex_sources.is_empty() {
        None
    } else {
        let joined = regex_sources
            .iter()
            .map(|s| format!("(?:{s})"))
            .collect::<Vec<_>>()
            .join("|");
        Some(fancy_regex::Regex::new(&joined).map_err(|e| BanlistError::InvalidRegex {
            index: regex_sources.len(),
            pattern: joined.clone(),
            message: e.to_string(),
        })?)
    };

    let phrase_matcher = if kept_phrases.is_empty() {
        None
    } else {
        Some(
            AhoCorasick::builder()
                .match_kind(MatchKind::Standard)
                .build(&kept_phrases)
                .map_err(|e| BanlistError::Matcher(e.to_string()))?,
        )
    };

    Ok(Banlist {
        phrases: kept_phrases,
        ngrams: kept_ngrams,
        regex_sources: regex_sources.to_vec(),
        whitelist,
        min_word_len,
        phrase_matcher,
        ngram_index,
        regexes,
        alternation,
    })
}

/// Index of the token whose char span contains `char_pos`.
pub fn char_to_token(token_spans: &[Range<usize>], char_pos: usize) -> Result<usize, OutOfRange> {
    let len = token_spans.last().map_or(0, |s| s.end);
    if char_pos >= len {
        return Err(OutOfRange { pos: char_pos, len });
    }
    let i = token_spans.partition_point(|s| s.start <= char_pos);
    // i >= 1 because spans partition [0, len) and the first starts at 0.
    let i = i - 1;
    debug_assert!(token_spans[i].contains(&char_pos));
    Ok(i)
}

/// Char spans of consecutive token texts.
pub fn spans_from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vec<Range<usize>> {
    let mut pos = 0;
    texts
        .into_iter()
        .map(|t| {
            let n = t.chars().count();
            let r = pos..pos + n;
            pos += n;
            r
        })
        .collect()
}

struct Folded {
    chars: Vec<char>,
    folded: String,
    index: CharIndex,
}

impl Folded {
    fn new(text: &str) -> Self {
        let chars: Vec<char> = text.chars().collect();
        let folded: String = chars.iter().map(|&c| text::fold_char(c)).collect();
        let index = CharIndex::new(&folded);
        Self { chars, folded, index }
    }
}

impl Banlist {
    pub fn empty() -> Self {
        compile_banlist(&[], &[], &[], &[], text::DEFAULT_MIN_WORD_LEN).expect("empty banlist compiles")
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn ngrams(&self) -> &[Vec<String>] {
        &self.ngrams
    }

    pub fn regex_sources(&self) -> &[String] {
        &self.regex_sources
    }

    pub fn whitelist(&self) -> &BTreeSet<String> {
        &self.whitelist
    }

    pub fn min_word_len(&self) -> usize {
        self.min_word_len
    }

    pub fn len(&self) -> usize {
        self.phrases.len() + self.ngrams.len() + self.regexes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Human-readable source of a pattern, used in event logs.
    pub fn describe(&self, id: PatternId) -> String {
        match id.kind {
            PatternKind::Phrase => self.phrases.get(id.index).cloned(),
            PatternKind::Ngram => self.ngrams.get(id.index).map(|g| g.join(" ")),
            PatternKind::Regex => self.regex_sources.get(id.index).cloned(),
        }
        .unwrap_or_else(|| id.to_string())
    }

    fn phrase_matches(&self, f: &Folded) -> Vec<(PatternId, Range<usize>)> {
        let Some(ac) = &self.phrase_matcher else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for m in ac.find_overlapping_iter(&f.folded) {
            let start = f.index.char_at_byte(m.start());
            let end = f.index.char_at_byte(m.end());
            let phrase = &self.phrases[m.pattern().as_usize()];
            if boundary_ok(&f.chars, start, end, phrase) {
                out.push((PatternId::phrase(m.pattern().as_usize()), start..end));
            }
        }
        out
    }

    fn ngram_matches(&self, text_str: &str) -> Vec<(PatternId, Range<usize>)> {
        if self.ngrams.is_empty() {
            return Vec::new();
        }
        let words = text::content_words(text_str, self.min_word_len, true);
        let mut out = Vec::new();
        let mut key: Vec<String> = Vec::with_capacity(3);
        for n in 2..=3 {
            for win in words.windows(n) {
                key.clear();
                key.extend(win.iter().map(|w| w.text.clone()));
                if let Some(&idx) = self.ngram_index.get(&key) {
                    out.push((PatternId::ngram(idx), win[0].span.start..win[n - 1].span.end));
                }
            }
        }
        out
    }

    fn regex_prefilter(&self, text_str: &str) -> bool {
        match &self.alternation {
            None => false,
            Some(re) => re.is_match(text_str).unwrap_or_else(|e| {
                tracing::warn!(error = %e, "regex alternation failed; scanning patterns individually");
                true
            }),
        }
    }

    /// Earliest un-ignored violation in `text`.
    ///
    /// Ties on start are broken by longer span, then by kind
    /// (phrase < ngram < regex), then by pattern index.
    pub fn scan(
        &self,
        text_str: &str,
        token_spans: &[Range<usize>],
        ignore: &HashSet<(usize, PatternId)>,
    ) -> Option<Violation> {
        if self.is_empty() || text_str.is_empty() {
            return None;
        }
        let folded = Folded::new(text_str);
        let n_chars = folded.chars.len();
        let is_ignored = |id: PatternId, start: usize| -> Option<usize> {
            let tok = char_to_token(token_spans, start).ok()?;
            (!ignore.contains(&(tok, id))).then_some(tok)
        };

        let mut best: Option<Violation> = None;
        let mut consider = |id: PatternId, span: Range<usize>, tok: usize| {
            let better = match &best {
                None => true,
                Some(b) => {
                    let key = |v: &Violation| {
                        (v.char_span.start, std::cmp::Reverse(v.char_span.len()), v.pattern_id)
                    };
                    let cand = (span.start, std::cmp::Reverse(span.len()), id);
                    cand < key(b)
                }
            };
            if better {
                best = Some(Violation { pattern_id: id, char_span: span, start_token_index: tok });
            }
        };

        for (id, span) in self
            .phrase_matches(&folded)
            .into_iter()
            .chain(self.ngram_matches(text_str))
        {
            if span.is_empty() {
                continue;
            }
            if let Some(tok) = is_ignored(id, span.start) {
                consider(id, span, tok);
            }
        }

        if self.regex_prefilter(text_str) {
            let index = CharIndex::new(text_str);
            for (ri, re) in self.regexes.iter().enumerate() {
                let id = PatternId::regex(ri);
                let mut pos = 0usize;
                while pos <= text_str.len() {
                    let m = match re.find_from_pos(text_str, pos) {
                        Ok(Some(m)) => m,
                        Ok(None) => break,
                        Err(e) => {
                            tracing::warn!(pattern = %self.regex_sources[ri], error = %e, "regex match failed");
                            break;
                        }
                    };
                    let start = index.char_at_byte(m.start());
                    let end = index.char_at_byte(m.end());
                    if end > start {
                        if let Some(tok) = is_ignored(id, start) {
                            consider(id, start..end, tok);
                            break;
                        }
                    }
                    if start >= n_chars {
                        break;
                    }
                    pos = index.byte(start + 1);
                }
            }
        }
        best
    }

    /// Count every match of every pattern: overlapping phrase and n-gram
    /// occurrences, non-overlapping matches per regex.
    pub fn count_matches(&self, text_str: &str) -> usize {
        if self.is_empty() || text_str.is_empty() {
            return 0;
        }
        let folded = Folded::new(text_str);
        let mut n = self.phrase_matches(&folded).len() + self.ngram_matches(text_str).len();
        if self.regex_prefilter(text_str) {
            for re in &self.regexes {
                n += re
                    .find_iter(text_str)
                    .filter_map(Result::ok)
                    .filter(|m| m.end() > m.start())
                    .count();
            }
        }
        n
    }

    /// All matches as (pattern, char span), sorted by start.
    pub fn find_all(&self, text_str: &str) -> Vec<(PatternId, Range<usize>)> {
        if self.is_empty() || text_str.is_empty() {
            return Vec::new();
        }
        let folded = Folded::new(text_str);
        let mut out = self.phrase_matches(&folded);
        out.extend(self.ngram_matches(text_str));
        if self.regex_prefilter(text_str) {
            let index = CharIndex::new(text_str);
            for (ri, re) in self.regexes.iter().enumerate() {
                for m in re.find_iter(text_str).filter_map(Result::ok) {
                    if m.end() > m.start() {
                        out.push((
                            PatternId::regex(ri),
                            index.char_at_byte(m.start())..index.char_at_byte(m.end()),
                        ));
                    }
                }
            }
        }
        out.sort_by_key(|(id, span)| (span.start, std::cmp::Reverse(span.len()), *id));
        out
    }

    /// Whether a token, placed at a word start, can only continue into a
    /// banned phrase: its trimmed, lowercased text is a proper prefix of a
    /// phrase and stops in the middle of that phrase's first word.
    pub fn token_opens_phrase(&self, token_text: &str) -> bool {
        let t = text::fold_case(token_text.trim_start());
        if t.is_empty() {
            return false;
        }
        self.phrases.iter().any(|p| {
            p.len() > t.len()
                && p.starts_with(&t)
                && p[t.len()..].chars().next().is_some_and(text::is_word_char)
                && t.chars().last().is_some_and(text::is_word_char)
        })
    }
}

fn boundary_ok(chars: &[char], start: usize, end: usize, phrase: &str) -> bool {
    let first_is_word = phrase.chars().next().is_some_and(text::is_word_char);
    let last_is_word = phrase.chars().last().is_some_and(text::is_word_char);
    let left = !first_is_word || start == 0 || !text::is_word_char(chars[start - 1]);
    let right = !last_is_word || end >= chars.len() || !text::is_word_char(chars[end]);
    left && right
}
