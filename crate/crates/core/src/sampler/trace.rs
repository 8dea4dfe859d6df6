use std::collections::{BTreeMap, HashSet};
use std::ops::Range;

use super::dist::{Dist, Penalty};
use crate::backend::Token;
use crate::pattern::PatternId;

/// A token rejected at some position, and the pattern that rejected it.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub token: Token,
    pub pattern_id: PatternId,
}

/// Generated tokens with their char spans and cached candidate lists.
#[derive(Debug, Clone, Default)]
pub struct TokenTrace {
    tokens: Vec<Token>,
    spans: Vec<Range<usize>>,
    byte_ends: Vec<usize>,
    candidates: Vec<Dist>,
    text: String,
    ignore_marks: HashSet<(usize, PatternId)>,
    rejections: BTreeMap<usize, Vec<Rejection>>,
}

impl TokenTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    /// Char spans into [`text`](Self::text).
    pub fn spans(&self) -> &[Range<usize>] {
        &self.spans
    }

    /// Candidate probabilities per position, as received.
    pub fn candidates(&self) -> &[Dist] {
        &self.candidates
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn ignore_marks(&self) -> &HashSet<(usize, PatternId)> {
        &self.ignore_marks
    }

    pub fn rejections(&self) -> &BTreeMap<usize, Vec<Rejection>> {
        &self.rejections
    }

    pub fn text_before(&self, position: usize) -> &str {
        let end = if position == 0 { 0 } else { self.byte_ends[position - 1] };
        &self.text[..end]
    }

    pub fn push(&mut self, token: Token, candidates: Dist) {
        let start = self.spans.last().map_or(0, |s| s.end);
        let end = start + token.text.chars().count();
        self.text.push_str(&token.text);
        self.byte_ends.push(self.text.len());
        self.spans.push(start..end);
        self.tokens.push(token);
        self.candidates.push(candidates);
    }

    /// Keep the first `position` tokens. Ignore marks at or after `position`
    /// and rejections after it are dropped; rejections at `position` stay
    /// because its prefix is unchanged.
    pub fn rewind_to(&mut self, position: usize) {
        if position >= self.tokens.len() {
            return;
        }
        self.text.truncate(self.text_before(position).len());
        self.tokens.truncate(position);
        self.spans.truncate(position);
        self.byte_ends.truncate(position);
        self.candidates.truncate(position);
        self.ignore_marks.retain(|(p, _)| *p < position);
        self.rejections.split_off(&(position + 1));
    }

    pub fn record_rejection(&mut self, position: usize, token: &Token, pattern_id: PatternId) {
        self.rejections
            .entry(position)
            .or_default()
            .push(Rejection { token: token.clone(), pattern_id });
    }

    /// Rejection counts per token at `position`, in first-rejection order.
    pub fn penalties(&self, position: usize) -> Vec<Penalty> {
        let mut out: Vec<Penalty> = Vec::new();
        for r in self.rejections.get(&position).into_iter().flatten() {
            match out.iter_mut().find(|p| p.token.same(&r.token)) {
                Some(p) => p.count += 1,
                None => out.push(Penalty { token: r.token.clone(), count: 1 }),
            }
        }
        out
    }

    /// `token` is being kept at `position` despite earlier rejections there:
    /// stop flagging every pattern that rejected it.
    pub fn mark_let_through(&mut self, position: usize, token: &Token) {
        let ids: Vec<PatternId> = self
            .rejections
            .get(&position)
            .into_iter()
            .flatten()
            .filter(|r| r.token.same(token))
            .map(|r| r.pattern_id)
            .collect();
        for id in ids {
            self.ignore_marks.insert((position, id));
        }
    }

    pub fn check_integrity(&self) -> Result<(), String> {
        let n = self.tokens.len();
        if self.spans.len() != n || self.candidates.len() != n || self.byte_ends.len() != n {
            return Err(format!(
                "{n} tokens, {} spans, {} candidate lists",
                self.spans.len(),
                self.candidates.len()
            ));
        }
        let mut at = 0;
        for (i, (t, s)) in self.tokens.iter().zip(&self.spans).enumerate() {
            if s.start != at || s.end - s.start != t.text.chars().count() {
                return Err(format!("span {i} is {s:?}, expected to start at {at}"));
            }
            at = s.end;
        }
        if self.text.chars().count() != at {
            return Err("text length differs from spans".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Token {
        Token::text(s)
    }

    #[test]
    fn push_and_rewind_keep_spans_consistent() {
        let mut tr = TokenTrace::new();
        for w in ["Hé", " llo", " wörld"] {
            tr.push(t(w), vec![(t(w), 1.0)]);
        }
        assert_eq!(tr.spans(), &[0..2, 2..6, 6..12]);
        assert_eq!(tr.text_before(2), "Hé llo");
        tr.rewind_to(1);
        assert_eq!(tr.text(), "Hé");
        tr.check_integrity().unwrap();
    }

    #[test]
    fn rewind_drops_later_state() {
        let mut tr = TokenTrace::new();
        for w in ["a", "b", "c"] {
            tr.push(t(w), vec![]);
        }
        tr.record_rejection(1, &t("b"), PatternId::phrase(0));
        tr.record_rejection(2, &t("c"), PatternId::phrase(0));
        tr.mark_let_through(2, &t("c"));
        tr.rewind_to(1);
        assert!(tr.rejections().contains_key(&1));
        assert!(!tr.rejections().contains_key(&2));
        assert!(tr.ignore_marks().is_empty());
    }

    #[test]
    fn penalties_count_repeats() {
        let mut tr = TokenTrace::new();
        tr.record_rejection(0, &t("x"), PatternId::phrase(0));
        tr.record_rejection(0, &t("y"), PatternId::phrase(1));
        tr.record_rejection(0, &t("x"), PatternId::regex(0));
        let p = tr.penalties(0);
        assert_eq!(p[0].count, 2);
        assert_eq!(p[1].count, 1);
    }
}
