//! Banlist suppression and lexical diversity.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::pattern::Banlist;
use crate::text;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("{0} corpus is empty")]
    EmptyCorpus(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuppressionReport {
    /// In `[0, 100]`.
    pub percent: f64,
    /// Banned-pattern matches per 1,000 characters.
    pub baseline_per_1k: f64,
    pub treated_per_1k: f64,
    /// The baseline had no matches, so the rate is reported as 0.
    pub baseline_zero: bool,
}

/// Matches per 1,000 chars over a corpus.
pub fn match_rate(corpus: &[String], banlist: &Banlist) -> f64 {
    let (hits, chars) = corpus
        .par_iter()
        .map(|d| (banlist.count_matches(d), d.chars().count()))
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if chars == 0 {
        0.0
    } else {
        hits as f64 * 1000.0 / chars as f64
    }
}

pub fn suppression_rate(
    baseline: &[String],
    treated: &[String],
    banlist: &Banlist,
) -> Result<SuppressionReport, MetricsError> {
    if baseline.is_empty() {
        return Err(MetricsError::EmptyCorpus("baseline"));
    }
    if treated.is_empty() {
        return Err(MetricsError::EmptyCorpus("treated"));
    }
    let fb = match_rate(baseline, banlist);
    let ft = match_rate(treated, banlist);
    let (percent, baseline_zero) = if fb > 0.0 {
        ((100.0 * (1.0 - ft / fb)).clamp(0.0, 100.0), false)
    } else {
        (0.0, true)
    };
    Ok(SuppressionReport { percent, baseline_per_1k: fb, treated_per_1k: ft, baseline_zero })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityOptions {
    pub mattr_window: usize,
    pub hdd_sample_size: usize,
}

impl Default for DiversityOptions {
    fn default() -> Self {
        Self { mattr_window: 500, hdd_sample_size: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub mattr_500: f64,
    pub root_ttr: f64,
    pub hdd: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
    pub distinct_3: f64,
    /// Plain mean of the six components.
    pub aggregate: f64,
    pub n_words: usize,
    /// Fewer words than one MATTR window; MATTR is the whole-text TTR.
    pub mattr_short_text: bool,
}

impl DiversityReport {
    pub fn components(&self) -> [f64; 6] {
        [self.mattr_500, self.root_ttr, self.hdd, self.distinct_1, self.distinct_2, self.distinct_3]
    }

    /// Mean of `100 · x / x_baseline` per component; components with a zero
    /// baseline are left out.
    pub fn normalized_aggregate(&self, baseline: &DiversityReport) -> f64 {
        let scaled: Vec<f64> = self
            .components()
            .iter()
            .zip(baseline.components())
            .filter(|(_, b)| *b > 0.0)
            .map(|(x, b)| 100.0 * x / b)
            .collect();
        if scaled.is_empty() {
            0.0
        } else {
            scaled.iter().sum::<f64>() / scaled.len() as f64
        }
    }
}

/// Mean type-token ratio over every `window`-word window, step 1.
pub fn mattr(words: &[String], window: usize) -> f64 {
    if words.is_empty() {
        return 0.0;
    }
    let w = window.max(1).min(words.len());
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for x in &words[..w] {
        *counts.entry(x.as_str()).or_insert(0) += 1;
    }
    let mut types = counts.len();
    let mut sum = types as f64;
    for i in w..words.len() {
        let out = counts.get_mut(words[i - w].as_str()).expect("window word counted");
        *out -= 1;
        if *out == 0 {
            types -= 1;
        }
        let inc = counts.entry(words[i].as_str()).or_insert(0);
        if *inc == 0 {
            types += 1;
        }
        *inc += 1;
        sum += types as f64;
    }
    sum / (words.len() - w + 1) as f64 / w as f64
}

pub fn root_ttr(words: &[String]) -> f64 {
    if words.is_empty() {
        return 0.0;
    }
    let types: HashSet<&str> = words.iter().map(String::as_str).collect();
    types.len() as f64 / (words.len() as f64).sqrt()
}

/// Expected share of types in a random `sample_size`-word draw without
/// replacement, divided by the draw size.
pub fn hdd(words: &[String], sample_size: usize) -> f64 {
    let n_total = words.len();
    if n_total == 0 {
        return 0.0;
    }
    let n = sample_size.max(1).min(n_total);
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for x in words {
        *freq.entry(x.as_str()).or_insert(0) += 1;
    }
    let mut freqs: Vec<usize> = freq.into_values().collect();
    freqs.sort_unstable();
    let mut sum = 0.0;
    for f in freqs {
        let p_absent = if n_total - f < n {
            0.0
        } else {
            (0..n).map(|i| (n_total - f - i) as f64 / (n_total - i) as f64).product()
        };
        sum += 1.0 - p_absent;
    }
    sum / n as f64
}

/// Unique n-grams over all n-grams, pooled over documents without crossing
/// document boundaries.
pub fn distinct_n(docs: &[Vec<String>], n: usize) -> f64 {
    let mut seen: HashSet<&[String]> = HashSet::new();
    let mut total = 0usize;
    for d in docs {
        if d.len() >= n {
            for g in d.windows(n) {
                seen.insert(g);
                total += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

pub fn diversity(corpus: &[String], opts: &DiversityOptions) -> Result<DiversityReport, MetricsError> {
    let docs: Vec<Vec<String>> = corpus.par_iter().map(|d| text::word_strings(d)).collect();
    let words: Vec<String> = docs.iter().flatten().cloned().collect();
    if words.is_empty() {
        return Err(MetricsError::EmptyCorpus("diversity"));
    }
    let mut r = DiversityReport {
        mattr_500: mattr(&words, opts.mattr_window),
        root_ttr: root_ttr(&words),
        hdd: hdd(&words, opts.hdd_sample_size),
        distinct_1: distinct_n(&docs, 1),
        distinct_2: distinct_n(&docs, 2),
        distinct_3: distinct_n(&docs, 3),
        aggregate: 0.0,
        n_words: words.len(),
        mattr_short_text: words.len() < opts.mattr_window,
    };
    r.aggregate = r.components().iter().sum::<f64>() / 6.0;
    Ok(r)
}

/// One row per document for CSV export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocRow {
    pub corpus: String,
    pub index: usize,
    pub chars: usize,
    pub words: usize,
    pub matches: usize,
    pub matches_per_1k: f64,
    pub root_ttr: f64,
    pub distinct_1: f64,
}

pub fn document_rows(label: &str, corpus: &[String], banlist: &Banlist) -> Vec<DocRow> {
    corpus
        .par_iter()
        .enumerate()
        .map(|(index, d)| {
            let ws = text::word_strings(d);
            let chars = d.chars().count();
            let matches = banlist.count_matches(d);
            DocRow {
                corpus: label.to_string(),
                index,
                chars,
                words: ws.len(),
                matches,
                matches_per_1k: if chars == 0 { 0.0 } else { matches as f64 * 1000.0 / chars as f64 },
                root_ttr: root_ttr(&ws),
                distinct_1: distinct_n(std::slice::from_ref(&ws), 1),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pattern::compile_banlist;

    fn w(n: usize, f: impl Fn(usize) -> String) -> Vec<String> {
        (0..n).map(f).collect()
    }

    #[test]
    fn repeated_word() {
        let words = w(1000, |_| "tapestry".into());
        assert_eq!(mattr(&words, 500), 1.0 / 500.0);
        assert_eq!(distinct_n(std::slice::from_ref(&words), 1), 1.0 / 1000.0);
    }

    #[test]
    fn all_distinct() {
        let words = w(100, |i| format!("w{i}"));
        assert_eq!(distinct_n(std::slice::from_ref(&words), 1), 1.0);
        assert_eq!(root_ttr(&words), 10.0);
        assert!((hdd(&words, 42) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn self_normalized_aggregate_is_100() {
        let c = vec!["the quick brown fox jumps over the lazy dog".to_string()];
        let r = diversity(&c, &DiversityOptions::default()).unwrap();
        assert!(r.mattr_short_text);
        assert_eq!(r.normalized_aggregate(&r), 100.0);
    }

    #[test]
    fn suppression_cases() {
        let ban = compile_banlist(&["tapestry".to_string()], &[], &[], &[], 3).unwrap();
        let base = vec!["a tapestry".to_string()];
        let clean = vec!["a rugs here".to_string()];
        assert_eq!(suppression_rate(&base, &clean, &ban).unwrap().percent, 100.0);
        assert_eq!(suppression_rate(&base, &base, &ban).unwrap().percent, 0.0);
        let r = suppression_rate(&clean, &base, &ban).unwrap();
        assert!(r.baseline_zero);
        assert_eq!(r.percent, 0.0);
    }
}
