use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use antislop_core::backend::{ContextRule, MockModel, MockModelSpec, Token};
use antislop_core::pattern::{char_to_token, compile_banlist, spans_from_texts, Banlist};
use antislop_core::sampler::dist::{
    attenuate, filtered, normalize, resample_penalized, sample, Dist, LadderStage, Penalty, SamplingParams,
};
use antislop_core::sampler::{events_are_loop_free, generate, SamplerConfig};

const WORDS: [&str; 8] = [" tapestry", " rug", " Elara", " the", " shimmering", " quiet", " door", "."];

fn dist_strategy() -> impl Strategy<Value = Dist> {
    proptest::collection::vec(0.001f64..1.0, 2..8).prop_map(|ps| {
        let mut d: Dist = ps.iter().enumerate().map(|(i, p)| (Token::text(format!("t{i}")), *p)).collect();
        normalize(&mut d);
        d
    })
}

fn params_strategy() -> impl Strategy<Value = SamplingParams> {
    (0.0f64..0.5, 0.2f64..2.0, 0.3f64..=1.0, proptest::option::of(1usize..6))
        .prop_map(|(min_p, temperature, top_p, top_k)| SamplingParams { temperature, min_p, top_p, top_k })
}

fn word_text() -> impl Strategy<Value = Vec<&'static str>> {
    proptest::collection::vec(proptest::sample::select(&WORDS[..]), 0..30)
}

fn model(weights: &[f64]) -> MockModel {
    let total: f64 = weights.iter().sum();
    let default: Vec<(String, f64)> = WORDS.iter().zip(weights).map(|(w, p)| (w.to_string(), p / total)).collect();
    let vocabulary = WORDS.iter().map(|w| w.to_string()).collect();
    let contexts = vec![ContextRule {
        suffix: " the".into(),
        candidates: vec![(" tapestry".into(), 0.7), (" rug".into(), 0.2), (" door".into(), 0.1)],
    }];
    MockModel::new(MockModelSpec { vocabulary, contexts, default }).unwrap()
}

fn ban() -> Banlist {
    compile_banlist(&["tapestry".to_string(), "shimmering quiet".to_string()], &[], &[], &[], 3).unwrap()
}

proptest! {
    #[test]
    fn filtered_is_a_distribution(d in dist_strategy(), p in params_strategy()) {
        let (out, survivors) = filtered(d.clone(), &p);
        prop_assert!(!out.is_empty());
        let s: f64 = out.iter().map(|x| x.1).sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
        prop_assert!(out.len() <= survivors.len());
        for (t, _) in &out {
            prop_assert!(d.iter().any(|(u, _)| u.same(t)));
        }
    }

    #[test]
    fn normalize_is_idempotent(d in dist_strategy()) {
        let mut a = d.clone();
        normalize(&mut a);
        for (x, y) in a.iter().zip(&d) {
            prop_assert!((x.1 - y.1).abs() < 1e-12);
        }
    }

    #[test]
    fn attenuation_is_monotone(p in 0.0f64..1.0, s1 in 0.0f64..1.0, s2 in 0.0f64..1.0) {
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        prop_assert!(attenuate(p, hi) <= attenuate(p, lo));
        prop_assert_eq!(attenuate(p, 0.0), p);
    }

    #[test]
    fn forced_resample_avoids_banned_when_possible(d in dist_strategy(), p in params_strategy(), nb in 1usize..3) {
        let nb = nb.min(d.len() - 1);
        let pens: Vec<Penalty> = d.iter().take(nb).map(|(t, _)| Penalty { token: t.clone(), count: 1 }).collect();
        let r = resample_penalized(&d, &pens, 1.0, &p, true);
        prop_assert!(r.stage != LadderStage::LetThrough);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let t = sample(&r.dist, &mut rng);
            prop_assert!(!pens.iter().any(|x| x.token.same(&t)));
        }
    }

    #[test]
    fn scan_agrees_with_find_all(words in word_text()) {
        let b = ban();
        let text: String = words.concat();
        let spans = spans_from_texts(words.iter().copied());
        let all = b.find_all(&text);
        let v = b.scan(&text, &spans, &HashSet::new());
        prop_assert_eq!(v.is_some(), !all.is_empty());
        prop_assert_eq!(v.is_some(), b.count_matches(&text) > 0);
        if let Some(v) = v {
            prop_assert_eq!(v.char_span.start, all[0].1.start);
            prop_assert_eq!(Ok(v.start_token_index), char_to_token(&spans, v.char_span.start));
            let s = &spans[v.start_token_index];
            prop_assert!(s.start <= v.char_span.start && v.char_span.start < s.end);
        }
    }

    #[test]
    fn generation_invariants(weights in proptest::collection::vec(0.05f64..1.0, 8), seed in 0u64..1000, chunk in 1usize..12) {
        let m = model(&weights);
        let cfg = SamplerConfig { max_new_tokens: 40, chunk_size: chunk, top_logprobs_count: 8, min_p: 0.0, force_backtrack: true, ..Default::default() };
        let g = generate(&m, "Go:", &ban(), &cfg, seed).unwrap();
        prop_assert_eq!(ban().count_matches(&g.text), 0, "{}", g.text);
        prop_assert!(g.trace.len() <= cfg.max_new_tokens);
        prop_assert!(g.trace.check_integrity().is_ok());
        prop_assert!(events_are_loop_free(&g.events));
        prop_assert_eq!(g.stats.tokens_kept, g.trace.len());
        prop_assert_eq!(g.stats.tokens_generated + g.stats.tokens_resampled, g.stats.tokens_kept + g.stats.tokens_discarded);
        for e in &g.events {
            prop_assert!(!e.chosen_candidates.iter().any(|t| t.same(&e.rejected_token)));
        }
        let again = generate(&m, "Go:", &ban(), &cfg, seed).unwrap();
        prop_assert_eq!(again.text, g.text);
    }

    #[test]
    fn zero_strength_changes_nothing(weights in proptest::collection::vec(0.05f64..1.0, 8), seed in 0u64..1000) {
        let m = model(&weights);
        let cfg = SamplerConfig { max_new_tokens: 30, chunk_size: 5, top_logprobs_count: 8, ban_strength: 0.0, ..Default::default() };
        let a = generate(&m, "Go:", &ban(), &cfg, seed).unwrap();
        let b = generate(&m, "Go:", &Banlist::empty(), &cfg, seed).unwrap();
        prop_assert_eq!(a.text, b.text);
        prop_assert!(a.events.is_empty());
    }
}
