//! Word tokenization shared by the pattern engine, the profiler and the
//! diversity metrics.
//!
//! A word is a maximal run of word characters (letters, digits, underscore),
//! optionally joined by internal apostrophes (`'` or `’`), so `don't` stays a
//! single word. Words are lowercased scalar-by-scalar and the curly apostrophe
//! is folded to `'`. All offsets are in `char` (Unicode scalar) units.

use std::collections::HashSet;
use std::ops::Range;
use std::sync::OnceLock;

const STOPWORDS_EN: &str = include_str!("../data/stopwords_en.txt");

/// Version tag of the bundled stopword list.
pub const STOPWORDS_VERSION: &str = "en-v1";

/// Default minimum word length for n-gram streams.
pub const DEFAULT_MIN_WORD_LEN: usize = 3;

/// Word character class used for phrase boundary checks.
#[inline]
pub fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

#[inline]
fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '’'
}

/// Simple per-scalar lowercase. Scalars whose lowercase form expands to
/// several scalars are left unchanged so char offsets are preserved.
#[inline]
pub fn fold_char(c: char) -> char {
    let mut it = c.to_lowercase();
    match (it.next(), it.next()) {
        (Some(l), None) => l,
        _ => c,
    }
}

/// Lowercase a string with [`fold_char`]; the result has the same number of
/// chars as the input.
pub fn fold_case(s: &str) -> String {
    s.chars().map(fold_char).collect()
}

/// A word with its char span in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Word {
    pub text: String,
    pub span: Range<usize>,
}

/// Split `text` into normalized words with char spans.
pub fn words(text: &str) -> Vec<Word> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if !is_word_char(chars[i]) {
            i += 1;
            continue;
        }
        let start = i;
        let mut buf = String::new();
        loop {
            while i < chars.len() && is_word_char(chars[i]) {
                buf.push(fold_char(chars[i]));
                i += 1;
            }
            if i + 1 < chars.len() && is_apostrophe(chars[i]) && is_word_char(chars[i + 1]) {
                buf.push('\'');
                i += 1;
            } else {
                break;
            }
        }
        out.push(Word { text: buf, span: start..i });
    }
    out
}

/// Just the normalized word strings.
pub fn word_strings(text: &str) -> Vec<String> {
    words(text).into_iter().map(|w| w.text).collect()
}

fn stopword_set() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORDS_EN
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    })
}

pub fn is_stopword(word: &str) -> bool {
    stopword_set().contains(word)
}

/// The bundled stopword list, in file order.
pub fn stopwords() -> Vec<&'static str> {
    STOPWORDS_EN
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
}

/// Word stream used for n-gram analysis: short words are dropped and, when
/// requested, stopwords too.
pub fn content_words(text: &str, min_word_len: usize, remove_stopwords: bool) -> Vec<Word> {
    words(text)
        .into_iter()
        .filter(|w| w.text.chars().count() >= min_word_len)
        .filter(|w| !(remove_stopwords && is_stopword(&w.text)))
        .collect()
}

/// Convert char offsets to byte offsets and back for one string.
#[derive(Debug, Clone)]
pub struct CharIndex {
    /// Byte offset of each char, plus a final entry for `len()`.
    byte_of_char: Vec<usize>,
}

impl CharIndex {
    pub fn new(s: &str) -> Self {
        let mut byte_of_char: Vec<usize> = s.char_indices().map(|(b, _)| b).collect();
        byte_of_char.push(s.len());
        Self { byte_of_char }
    }

    pub fn char_len(&self) -> usize {
        self.byte_of_char.len() - 1
    }

    pub fn byte(&self, char_pos: usize) -> usize {
        self.byte_of_char[char_pos]
    }

    /// Char offset of a byte offset that lies on a char boundary.
    pub fn char_at_byte(&self, byte: usize) -> usize {
        match self.byte_of_char.binary_search(&byte) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        }
    }
}
