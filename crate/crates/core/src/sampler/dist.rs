//! Probability-space transforms over short candidate lists.
//!
//! Order of operations for a resample after a ban:
//! attenuate → renormalize → min-p → temperature → top-k → top-p → renormalize.

use rand::Rng;

use crate::backend::Token;

/// A (token, probability) list. Order is significant for tie-breaking.
pub type Dist = Vec<(Token, f64)>;

/// Soft-ban attenuation: `prob · 10^(−10·s)`.
pub fn attenuate(prob: f64, ban_strength: f64) -> f64 {
    prob * 10f64.powf(-10.0 * ban_strength)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingParams {
    pub temperature: f64,
    pub min_p: f64,
    pub top_p: f64,
    /// `None` disables top-k.
    pub top_k: Option<usize>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self { temperature: 1.0, min_p: 0.0, top_p: 1.0, top_k: None }
    }
}

pub fn normalize(dist: &mut Dist) {
    let total: f64 = dist.iter().map(|(_, p)| *p).sum();
    if total > 0.0 && total.is_finite() {
        for (_, p) in dist.iter_mut() {
            *p /= total;
        }
    }
}

fn sort_desc(dist: &mut Dist) {
    dist.sort_by(|a, b| b.1.total_cmp(&a.1));
}

/// Drop entries below `min_p × max`.
pub fn min_p_filter(dist: &mut Dist, min_p: f64) {
    if min_p <= 0.0 {
        return;
    }
    let max = dist.iter().map(|(_, p)| *p).fold(0.0, f64::max);
    let threshold = min_p * max;
    dist.retain(|(_, p)| *p >= threshold);
}

/// `p^(1/T)` renormalized, computed in log space so small `T` stays finite.
/// `T <= 0` degenerates to greedy.
pub fn apply_temperature(dist: &mut Dist, temperature: f64) {
    if dist.is_empty() || temperature == 1.0 {
        return;
    }
    if temperature <= 0.0 {
        sort_desc(dist);
        dist.truncate(1);
        dist[0].1 = 1.0;
        return;
    }
    let scaled: Vec<f64> = dist.iter().map(|(_, p)| p.ln() / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for ((_, p), s) in dist.iter_mut().zip(scaled) {
        *p = (s - max).exp();
    }
    normalize(dist);
}

pub fn top_k_filter(dist: &mut Dist, top_k: Option<usize>) {
    if let Some(k) = top_k {
        sort_desc(dist);
        dist.truncate(k.max(1));
    }
}

/// Keep the smallest high-probability prefix whose mass reaches `top_p`.
pub fn top_p_filter(dist: &mut Dist, top_p: f64) {
    if top_p >= 1.0 || dist.is_empty() {
        return;
    }
    sort_desc(dist);
    let total: f64 = dist.iter().map(|(_, p)| *p).sum();
    let mut cum = 0.0;
    let mut keep = dist.len();
    for (i, (_, p)) in dist.iter().enumerate() {
        cum += *p / total;
        if cum >= top_p {
            keep = i + 1;
            break;
        }
    }
    dist.truncate(keep);
}

/// min-p, temperature, top-k, top-p, renormalize. Expects a normalized input.
pub fn filtered(mut dist: Dist, params: &SamplingParams) -> (Dist, Dist) {
    min_p_filter(&mut dist, params.min_p);
    let survivors = dist.clone();
    apply_temperature(&mut dist, params.temperature);
    top_k_filter(&mut dist, params.top_k);
    top_p_filter(&mut dist, params.top_p);
    normalize(&mut dist);
    (dist, survivors)
}

/// Draw one token. Scans in list order, so equal inputs and rng state give
/// equal outputs.
pub fn sample<R: Rng + ?Sized>(dist: &Dist, rng: &mut R) -> Token {
    assert!(!dist.is_empty(), "sampling from an empty distribution");
    let total: f64 = dist.iter().map(|(_, p)| *p).sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut cum = 0.0;
    for (t, p) in dist {
        cum += *p;
        if u < cum {
            return t.clone();
        }
    }
    dist.iter()
        .rev()
        .find(|(_, p)| *p > 0.0)
        .unwrap_or(&dist[dist.len() - 1])
        .0
        .clone()
}

/// A token already rejected at this position and how many times.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalty {
    pub token: Token,
    pub count: u32,
}

/// Which escalation stage produced a resample distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LadderStage {
    Configured,
    NoTemperature,
    NoMinP,
    NoTopP,
    NoTopK,
    /// Nothing but banned tokens survived; the soft ban lets one through.
    LetThrough,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resampled {
    /// Final sampling distribution.
    pub dist: Dist,
    /// min-p survivors at the stage that produced `dist`.
    pub survivors: Dist,
    pub stage: LadderStage,
}

/// Resample after `penalties` have been applied at a position. A token is
/// "banned" here when it appears in `penalties`.
pub fn resample_penalized(
    candidates: &Dist,
    penalties: &[Penalty],
    ban_strength: f64,
    params: &SamplingParams,
    force_backtrack: bool,
) -> Resampled {
    let is_banned = |t: &Token| penalties.iter().any(|p| p.token.same(t));
    let mut base: Dist = candidates
        .iter()
        .map(|(t, p)| {
            let n = penalties
                .iter()
                .find(|pen| pen.token.same(t))
                .map_or(0, |pen| pen.count);
            (t.clone(), attenuate(*p, ban_strength * n as f64))
        })
        .collect();
    normalize(&mut base);

    let mut stage_params = *params;
    let stages: &[LadderStage] = if force_backtrack {
        &[
            LadderStage::Configured,
            LadderStage::NoTemperature,
            LadderStage::NoMinP,
            LadderStage::NoTopP,
            LadderStage::NoTopK,
        ]
    } else {
        &[LadderStage::Configured]
    };
    let mut first: Option<(Dist, Dist)> = None;
    for &stage in stages {
        match stage {
            LadderStage::NoTemperature => stage_params.temperature = 1.0,
            LadderStage::NoMinP => stage_params.min_p = 0.0,
            LadderStage::NoTopP => stage_params.top_p = 1.0,
            LadderStage::NoTopK => stage_params.top_k = None,
            _ => {}
        }
        let (dist, survivors) = filtered(base.clone(), &stage_params);
        if dist.iter().any(|(t, p)| *p > 0.0 && !is_banned(t)) {
            return Resampled { dist, survivors, stage };
        }
        first.get_or_insert((dist, survivors));
    }
    let (dist, survivors) = first.expect("at least one stage ran");
    let dist = if dist.is_empty() {
        // Every candidate was filtered; fall back to the strongest banned one.
        let mut b = base;
        sort_desc(&mut b);
        b.truncate(1);
        b[0].1 = 1.0;
        b
    } else {
        dist
    };
    Resampled { dist, survivors, stage: LadderStage::LetThrough }
}

/// Resample with one banned token, as after a first violation at a position.
///
/// If nothing but the banned token survives filtering, the result is the
/// singleton `{banned: 1.0}` (after the escalation ladder when
/// `force_backtrack` is set).
pub fn resample_distribution(
    candidates: &Dist,
    banned_token: &Token,
    ban_strength: f64,
    params: &SamplingParams,
    force_backtrack: bool,
) -> Resampled {
    let penalties = [Penalty { token: banned_token.clone(), count: 1 }];
    let mut r = resample_penalized(candidates, &penalties, ban_strength, params, force_backtrack);
    if r.stage == LadderStage::LetThrough {
        r.dist = vec![(banned_token.clone(), 1.0)];
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn d(v: &[(&str, f64)]) -> Dist {
        v.iter().map(|(t, p)| (Token::text(*t), *p)).collect()
    }

    fn params(min_p: f64) -> SamplingParams {
        SamplingParams { min_p, ..Default::default() }
    }

    #[test]
    fn attenuation_worked_values() {
        assert!((attenuate(0.99, 0.2) - 0.0099).abs() < 1e-12);
        assert_eq!(attenuate(0.37, 0.0), 0.37);
        assert_relative_eq!(attenuate(0.5, 1.0), 5e-11, max_relative = 1e-12);
    }

    #[test]
    fn tapestry_survives_its_own_soft_ban() {
        let cands = d(&[("Tapestry", 0.99), ("Mural", 0.0005)]);
        let r = resample_distribution(&cands, &Token::text("Tapestry"), 0.2, &params(0.1), false);
        assert_eq!(r.dist, d(&[("Tapestry", 1.0)]));
        assert_eq!(r.stage, LadderStage::LetThrough);
    }

    #[test]
    fn hard_ban_two_tokens() {
        // A: 0.6 -> 6e-11; renormalized A ≈ 1.5e-10, B ≈ 1; A < 0.1·B.
        let cands = d(&[("A", 0.6), ("B", 0.4)]);
        let r = resample_distribution(&cands, &Token::text("A"), 1.0, &params(0.1), false);
        assert_eq!(r.dist.len(), 1);
        assert_eq!(r.dist[0].0.text, "B");
        assert_relative_eq!(r.dist[0].1, 1.0);
    }

    #[test]
    fn zero_strength_is_identity() {
        let cands = d(&[("A", 0.5), ("B", 0.5)]);
        let r = resample_distribution(&cands, &Token::text("A"), 0.0, &SamplingParams::default(), false);
        assert_eq!(r.dist, cands);
    }

    #[test]
    fn ladder_finds_alternative_when_min_p_blocks() {
        let cands = d(&[("Tapestry", 0.99), ("Mural", 0.0005)]);
        let r = resample_distribution(&cands, &Token::text("Tapestry"), 0.2, &params(0.1), true);
        assert_eq!(r.stage, LadderStage::NoMinP);
        assert!(r.dist.iter().any(|(t, _)| t.text == "Mural"));
    }

    #[test]
    fn ladder_exhausted_returns_banned() {
        let cands = d(&[("Only", 1.0)]);
        let r = resample_distribution(&cands, &Token::text("Only"), 1.0, &params(0.1), true);
        assert_eq!(r.dist, d(&[("Only", 1.0)]));
        assert_eq!(r.stage, LadderStage::LetThrough);
    }

    #[test]
    fn min_p_keeps_threshold_ties() {
        let mut x = d(&[("a", 0.5), ("b", 0.05), ("c", 0.04)]);
        min_p_filter(&mut x, 0.1);
        assert_eq!(x.len(), 2);
    }

    #[test]
    fn top_p_keeps_smallest_prefix() {
        let mut x = d(&[("a", 0.5), ("b", 0.3), ("c", 0.2)]);
        top_p_filter(&mut x, 0.8);
        assert_eq!(x.len(), 2);
        let mut y = d(&[("a", 0.5), ("b", 0.3), ("c", 0.2)]);
        top_p_filter(&mut y, 0.81);
        assert_eq!(y.len(), 3);
    }

    #[test]
    fn temperature_sharpens() {
        let mut x = d(&[("a", 0.6), ("b", 0.4)]);
        apply_temperature(&mut x, 0.5);
        // 0.36 / (0.36 + 0.16)
        assert_relative_eq!(x[0].1, 0.36 / 0.52, max_relative = 1e-12);
    }

    #[test]
    fn top_k_truncates() {
        let mut x = d(&[("a", 0.2), ("b", 0.5), ("c", 0.3)]);
        top_k_filter(&mut x, Some(2));
        assert_eq!(x.iter().map(|(t, _)| t.text.as_str()).collect::<Vec<_>>(), vec!["b", "c"]);
    }

    #[test]
    fn repeated_penalties_compound() {
        let cands = d(&[("A", 0.5), ("B", 0.5)]);
        let pens = [Penalty { token: Token::text("A"), count: 2 }];
        let r = resample_penalized(&cands, &pens, 0.05, &SamplingParams::default(), false);
        // A: 0.5·10^-1 = 0.05, B 0.5 → A = 0.05/0.55
        let a = r.dist.iter().find(|(t, _)| t.text == "A").unwrap().1;
        assert_relative_eq!(a, 0.05 / 0.55, max_relative = 1e-12);
    }
}
