//! Over-representation profiling of a generated corpus against a human
//! baseline, fingerprinting, and banlist construction.
//!
//! `ρ(p) = f_llm(p) / f_human(p)`, both in occurrences per million tokens of
//! the same kind. Patterns the baseline lacks are "nodict": they carry no
//! ratio and rank by `f_llm` alone.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::pattern::BanlistFile;
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NgramKind {
    Word,
    Bigram,
    Trigram,
}

impl NgramKind {
    pub const ALL: [NgramKind; 3] = [NgramKind::Word, NgramKind::Bigram, NgramKind::Trigram];

    pub fn arity(self) -> usize {
        match self {
            NgramKind::Word => 1,
            NgramKind::Bigram => 2,
            NgramKind::Trigram => 3,
        }
    }

    pub fn from_arity(n: usize) -> Option<Self> {
        match n {
            1 => Some(NgramKind::Word),
            2 => Some(NgramKind::Bigram),
            3 => Some(NgramKind::Trigram),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("cannot profile an empty corpus")]
    EmptyCorpus,
    #[error("baseline {path}:{line}: {message}")]
    Baseline { path: String, line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Pattern counts for one kind. Patterns are space-joined lowercase words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub kind: NgramKind,
    pub counts: BTreeMap<String, u64>,
    /// Distinct prompt ids each pattern occurred under.
    pub prompts: BTreeMap<String, BTreeSet<String>>,
    /// Number of units of this kind (words, or n-gram positions).
    pub total: u64,
}

impl FrequencyTable {
    pub fn new(kind: NgramKind) -> Self {
        Self { kind, counts: BTreeMap::new(), prompts: BTreeMap::new(), total: 0 }
    }

    pub fn count(&self, pattern: &str) -> u64 {
        self.counts.get(pattern).copied().unwrap_or(0)
    }

    pub fn n_prompts(&self, pattern: &str) -> usize {
        self.prompts.get(pattern).map_or(0, BTreeSet::len)
    }

    pub fn per_million(&self, pattern: &str) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.count(pattern) as f64 * 1e6 / self.total as f64
        }
    }

    /// Commutative, associative merge.
    pub fn merge(mut self, other: FrequencyTable) -> FrequencyTable {
        debug_assert_eq!(self.kind, other.kind);
        self.total += other.total;
        for (p, c) in other.counts {
            *self.counts.entry(p).or_insert(0) += c;
        }
        for (p, ids) in other.prompts {
            self.prompts.entry(p).or_default().extend(ids);
        }
        self
    }

    /// Drop all but the `k` most frequent patterns (ties lexicographic).
    /// `total` is unchanged.
    pub fn retain_top(&mut self, k: usize) {
        if self.counts.len() <= k {
            return;
        }
        let mut order: Vec<(&String, &u64)> = self.counts.iter().collect();
        order.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let keep: BTreeSet<String> = order.into_iter().take(k).map(|(p, _)| p.clone()).collect();
        self.counts.retain(|p, _| keep.contains(p));
        self.prompts.retain(|p, _| keep.contains(p));
    }

    pub fn to_baseline(&self) -> Baseline {
        Baseline {
            per_million: self.counts.keys().map(|p| (p.clone(), self.per_million(p))).collect(),
        }
    }
}

/// Units of `kind` in one text: words, or n-grams over the content-word stream.
pub fn units(text_str: &str, kind: NgramKind, min_word_len: usize, stopword_removal: bool) -> Vec<String> {
    let ws: Vec<String> = text::content_words(text_str, min_word_len, stopword_removal)
        .into_iter()
        .map(|w| w.text)
        .collect();
    let n = kind.arity();
    if ws.len() < n {
        return Vec::new();
    }
    ws.windows(n).map(|g| g.join(" ")).collect()
}

fn count_one(prompt_id: &str, text_str: &str, kind: NgramKind, min_word_len: usize, sw: bool) -> FrequencyTable {
    let mut t = FrequencyTable::new(kind);
    for u in units(text_str, kind, min_word_len, sw) {
        t.total += 1;
        *t.counts.entry(u.clone()).or_insert(0) += 1;
        t.prompts.entry(u).or_default().insert(prompt_id.to_string());
    }
    t
}

/// Count patterns of one kind over `(prompt_id, text)` documents.
pub fn count_patterns(
    corpus: &[(String, String)],
    kind: NgramKind,
    min_word_len: usize,
    stopword_removal: bool,
) -> Result<FrequencyTable, ProfileError> {
    if corpus.is_empty() {
        return Err(ProfileError::EmptyCorpus);
    }
    Ok(corpus
        .par_iter()
        .map(|(id, t)| count_one(id, t, kind, min_word_len, stopword_removal))
        .reduce(|| FrequencyTable::new(kind), FrequencyTable::merge))
}

/// Human reference frequencies, per million, for one kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub per_million: BTreeMap<String, f64>,
}

impl Baseline {
    pub fn get(&self, pattern: &str) -> f64 {
        self.per_million.get(pattern).copied().unwrap_or(0.0)
    }

    /// Read `pattern<TAB>per_million` lines. Blank lines, `#` comments and a
    /// non-numeric header line are skipped. Patterns are lowercased and
    /// whitespace-normalized.
    pub fn read_tsv(reader: impl BufRead, source: &str) -> Result<Self, ProfileError> {
        let mut per_million = BTreeMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| ProfileError::Io { path: source.to_string(), source: e })?;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| ProfileError::Baseline { path: source.to_string(), line: i + 1, message };
            let (pat, val) = line
                .split_once('\t')
                .ok_or_else(|| err("expected `pattern<TAB>per_million`".into()))?;
            let val: f64 = match val.trim().parse() {
                Ok(v) => v,
                Err(_) if per_million.is_empty() && i == 0 => continue,
                Err(e) => return Err(err(format!("bad frequency {val:?}: {e}"))),
            };
            if !(val >= 0.0) || !val.is_finite() {
                return Err(err(format!("frequency must be finite and >= 0, got {val}")));
            }
            let key = text::word_strings(pat).join(" ");
            if key.is_empty() {
                return Err(err("empty pattern".into()));
            }
            *per_million.entry(key).or_insert(0.0) += val;
        }
        Ok(Self { per_million })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProfileError> {
        let path = path.as_ref();
        let f = std::fs::File::open(path)
            .map_err(|e| ProfileError::Io { path: path.display().to_string(), source: e })?;
        Self::read_tsv(std::io::BufReader::new(f), &path.display().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlopClass {
    Dict,
    Nodict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub pattern: String,
    pub kind: NgramKind,
    pub count: u64,
    pub f_llm: f64,
    pub f_human: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    pub class: SlopClass,
    pub n_prompts: usize,
}

impl ProfileEntry {
    pub fn words(&self) -> Vec<String> {
        self.pattern.split(' ').map(str::to_string).collect()
    }
}

fn entry_order(a: &ProfileEntry, b: &ProfileEntry) -> std::cmp::Ordering {
    use std::cmp::Ordering::*;
    match (a.ratio, b.ratio) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => Less,
        (None, Some(_)) => Greater,
        (None, None) => b.f_llm.total_cmp(&a.f_llm),
    }
    .then_with(|| a.pattern.cmp(&b.pattern))
}

/// Ratios for every pattern in `llm`, dict entries by ratio then nodict
/// entries by `f_llm`, ties lexicographic.
pub fn compute_ratios(llm: &FrequencyTable, human: &Baseline) -> Vec<ProfileEntry> {
    let mut out: Vec<ProfileEntry> = llm
        .counts
        .iter()
        .map(|(p, &count)| {
            let f_llm = llm.per_million(p);
            let f_human = human.get(p);
            let ratio = (f_human > 0.0).then(|| f_llm / f_human);
            ProfileEntry {
                pattern: p.clone(),
                kind: llm.kind,
                count,
                f_llm,
                f_human,
                ratio,
                class: if ratio.is_some() { SlopClass::Dict } else { SlopClass::Nodict },
                n_prompts: llm.n_prompts(p),
            }
        })
        .collect();
    out.sort_by(entry_order);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileOptions {
    pub min_word_len: usize,
    /// Minimum raw occurrences for fingerprint and banlist entries.
    pub min_phrase_freq: u64,
    /// Minimum distinct prompts for fingerprint entries and banned n-grams.
    pub min_prompts: usize,
    pub fingerprint_words: usize,
    pub fingerprint_bigrams: usize,
    pub fingerprint_trigrams: usize,
    /// Keep only this many most frequent patterns per kind before ratios.
    #[serde(default)]
    pub top_k_words: Option<usize>,
    #[serde(default)]
    pub top_k_bigrams: Option<usize>,
    #[serde(default)]
    pub top_k_trigrams: Option<usize>,
}

impl ProfileOptions {
    pub fn top_k(&self, kind: NgramKind) -> Option<usize> {
        match kind {
            NgramKind::Word => self.top_k_words,
            NgramKind::Bigram => self.top_k_bigrams,
            NgramKind::Trigram => self.top_k_trigrams,
        }
    }
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            min_word_len: text::DEFAULT_MIN_WORD_LEN,
            min_phrase_freq: 2,
            min_prompts: 3,
            fingerprint_words: 120,
            fingerprint_bigrams: 40,
            fingerprint_trigrams: 40,
            top_k_words: None,
            top_k_bigrams: None,
            top_k_trigrams: None,
        }
    }
}

/// Ranked pattern lists; position 0 is rank 1.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub words: Vec<String>,
    pub bigrams: Vec<String>,
    pub trigrams: Vec<String>,
}

impl Fingerprint {
    pub fn lists(&self) -> [&[String]; 3] {
        [&self.words, &self.bigrams, &self.trigrams]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopProfile {
    pub words: Vec<ProfileEntry>,
    pub bigrams: Vec<ProfileEntry>,
    pub trigrams: Vec<ProfileEntry>,
    pub fingerprint: Fingerprint,
    pub options: ProfileOptions,
}

impl SlopProfile {
    pub fn entries(&self, kind: NgramKind) -> &[ProfileEntry] {
        match kind {
            NgramKind::Word => &self.words,
            NgramKind::Bigram => &self.bigrams,
            NgramKind::Trigram => &self.trigrams,
        }
    }

    pub fn from_entries(
        words: Vec<ProfileEntry>,
        bigrams: Vec<ProfileEntry>,
        trigrams: Vec<ProfileEntry>,
        options: ProfileOptions,
    ) -> Self {
        let pick = |entries: &[ProfileEntry], n: usize| -> Vec<String> {
            entries
                .iter()
                .filter(|e| e.n_prompts >= options.min_prompts && e.count >= options.min_phrase_freq)
                .take(n)
                .map(|e| e.pattern.clone())
                .collect()
        };
        let fingerprint = Fingerprint {
            words: pick(&words, options.fingerprint_words),
            bigrams: pick(&bigrams, options.fingerprint_bigrams),
            trigrams: pick(&trigrams, options.fingerprint_trigrams),
        };
        Self { words, bigrams, trigrams, fingerprint, options }
    }
}

/// Human baselines for each kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub words: Baseline,
    pub bigrams: Baseline,
    pub trigrams: Baseline,
}

impl Baselines {
    pub fn get(&self, kind: NgramKind) -> &Baseline {
        match kind {
            NgramKind::Word => &self.words,
            NgramKind::Bigram => &self.bigrams,
            NgramKind::Trigram => &self.trigrams,
        }
    }

    /// Split one TSV of mixed patterns by word count.
    pub fn from_mixed(all: &Baseline) -> Self {
        let mut b = Baselines::default();
        for (p, v) in &all.per_million {
            let slot = match p.split(' ').count() {
                1 => &mut b.words,
                2 => &mut b.bigrams,
                3 => &mut b.trigrams,
                _ => continue,
            };
            slot.per_million.insert(p.clone(), *v);
        }
        b
    }
}

/// Words keep stopwords; n-gram streams drop them.
pub fn build_profile(
    corpus: &[(String, String)],
    baselines: &Baselines,
    options: &ProfileOptions,
) -> Result<SlopProfile, ProfileError> {
    let mut per_kind = Vec::with_capacity(3);
    for kind in NgramKind::ALL {
        let sw = kind != NgramKind::Word;
        let mut table = count_patterns(corpus, kind, options.min_word_len, sw)?;
        if let Some(k) = options.top_k(kind) {
            table.retain_top(k);
        }
        per_kind.push(compute_ratios(&table, baselines.get(kind)));
    }
    let trigrams = per_kind.pop().unwrap_or_default();
    let bigrams = per_kind.pop().unwrap_or_default();
    let words = per_kind.pop().unwrap_or_default();
    Ok(SlopProfile::from_entries(words, bigrams, trigrams, options.clone()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quotas {
    pub dict_words: usize,
    pub nodict_words: usize,
    pub dict_bigrams: usize,
    pub nodict_bigrams: usize,
    pub dict_trigrams: usize,
    pub nodict_trigrams: usize,
}

impl Quotas {
    pub fn get(&self, kind: NgramKind, class: SlopClass) -> usize {
        match (kind, class) {
            (NgramKind::Word, SlopClass::Dict) => self.dict_words,
            (NgramKind::Word, SlopClass::Nodict) => self.nodict_words,
            (NgramKind::Bigram, SlopClass::Dict) => self.dict_bigrams,
            (NgramKind::Bigram, SlopClass::Nodict) => self.nodict_bigrams,
            (NgramKind::Trigram, SlopClass::Dict) => self.dict_trigrams,
            (NgramKind::Trigram, SlopClass::Nodict) => self.nodict_trigrams,
        }
    }
}

/// Top entries per (kind, class) under `quotas`. Words become phrases,
/// n-grams become n-gram entries. Whitelisted and `exclude`d patterns are
/// skipped and the next entry takes their place.
pub fn build_banlist(
    profile: &SlopProfile,
    quotas: &Quotas,
    whitelist: &[String],
    exclude: &BanlistFile,
) -> BanlistFile {
    let opts = &profile.options;
    let white: HashSet<String> = whitelist.iter().map(|w| text::word_strings(w).join(" ")).collect();
    let mut banned: HashSet<String> = exclude.slop_phrases.iter().map(|p| text::word_strings(p).join(" ")).collect();
    banned.extend(exclude.ngrams.iter().map(|g| text::word_strings(&g.join(" ")).join(" ")));

    let mut out = BanlistFile::default();
    for kind in NgramKind::ALL {
        for class in [SlopClass::Dict, SlopClass::Nodict] {
            let quota = quotas.get(kind, class);
            let picked = profile
                .entries(kind)
                .iter()
                .filter(|e| e.class == class)
                .filter(|e| e.count >= opts.min_phrase_freq)
                .filter(|e| kind == NgramKind::Word || e.n_prompts >= opts.min_prompts)
                .filter(|e| !white.contains(&e.pattern) && !banned.contains(&e.pattern))
                .take(quota);
            for e in picked {
                if kind == NgramKind::Word {
                    out.slop_phrases.push(e.pattern.clone());
                } else {
                    out.ngrams.push(e.words());
                }
            }
        }
    }
    out
}

/// Re-profile a corpus generated under `previous` and append up to
/// `quotas` new patterns.
pub fn iterate_profile(
    previous: &BanlistFile,
    new_corpus: &[(String, String)],
    baselines: &Baselines,
    options: &ProfileOptions,
    quotas: &Quotas,
    whitelist: &[String],
) -> Result<(BanlistFile, SlopProfile), ProfileError> {
    let profile = build_profile(new_corpus, baselines, options)?;
    let additions = build_banlist(&profile, quotas, whitelist, previous);
    let mut next = previous.clone();
    next.extend_unique(&additions);
    Ok((next, profile))
}

/// Sum of rank differences over the union of each sublist, divided by the
/// total union size. A pattern missing from a list has rank `len + 1`.
pub fn fingerprint_distance(a: &Fingerprint, b: &Fingerprint) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (la, lb) in a.lists().into_iter().zip(b.lists()) {
        let (ra, rb) = (rank(la), rank(lb));
        let union: BTreeSet<&str> = ra.keys().chain(rb.keys()).copied().collect();
        for p in &union {
            let x = ra.get(p).copied().unwrap_or(la.len() + 1);
            let y = rb.get(p).copied().unwrap_or(lb.len() + 1);
            sum += x.abs_diff(y) as f64;
        }
        n += union.len();
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn rank(l: &[String]) -> BTreeMap<&str, usize> {
    l.iter().enumerate().map(|(i, p)| (p.as_str(), i + 1)).collect()
}

/// Pairwise distances, row-major in input order.
pub fn distance_matrix(fps: &[Fingerprint]) -> Vec<Vec<f64>> {
    fps.iter()
        .map(|a| fps.iter().map(|b| fingerprint_distance(a, b)).collect())
        .collect()
}
