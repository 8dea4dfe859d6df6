use super::*;
use crate::backend::{ContextRule, MockModel, MockModelSpec};
use crate::pattern::compile_banlist;

fn strs(x: &[&str]) -> Vec<String> {
    x.iter().map(|s| s.to_string()).collect()
}

fn princess() -> MockModel {
    MockModel::new(MockModelSpec {
        vocabulary: strs(&[" Elara", " Freya", " Nadia", " the", " Princess", "."]),
        contexts: vec![ContextRule {
            suffix: "Princess".into(),
            candidates: vec![(" Elara".into(), 0.9), (" Freya".into(), 0.06), (" Nadia".into(), 0.04)],
        }],
        default: vec![(" the".into(), 0.3), (" Princess".into(), 0.6), (".".into(), 0.1)],
    })
    .unwrap()
}

fn phrases(p: &[&str]) -> Banlist {
    compile_banlist(&strs(p), &[], &[], &[], 3).unwrap()
}

fn cfg() -> SamplerConfig {
    SamplerConfig {
        max_new_tokens: 60,
        chunk_size: 7,
        top_logprobs_count: 5,
        top_k: None,
        min_p: 0.0,
        ..SamplerConfig::default()
    }
}

#[test]
fn hard_ban_removes_phrase() {
    let m = princess();
    let ban = phrases(&["Elara"]);
    for seed in 0..10 {
        let g = generate(&m, "Once upon a time,", &ban, &cfg(), seed).unwrap();
        assert!(!g.text.contains("Elara"), "{}", g.text);
        assert!(g.stats.backtracks > 0 || !g.text.contains("Princess"));
        assert_eq!(g.trace.len(), 60);
    }
}

#[test]
fn zero_strength_is_transparent() {
    let m = princess();
    let mut c = cfg();
    c.ban_strength = 0.0;
    let a = generate(&m, "Once", &phrases(&["Elara"]), &c, 3).unwrap();
    let b = generate(&m, "Once", &Banlist::empty(), &c, 3).unwrap();
    assert_eq!(a.text, b.text);
    assert!(a.events.is_empty());
}

#[test]
fn events_describe_the_rewind() {
    let m = princess();
    let g = generate(&m, "Once", &phrases(&["Elara"]), &cfg(), 1).unwrap();
    let e = g.events.first().expect("at least one backtrack");
    assert_eq!(e.rejected_token.text, " Elara");
    assert!(e.prefix.ends_with("Princess"));
    assert!(!e.chosen_candidates.iter().any(|t| t.text == " Elara"));
    assert!(e.chosen_candidates.iter().any(|t| t.same(&e.resampled_token)));
    assert_eq!(e.pattern, "elara");
    assert!(events_are_loop_free(&g.events));
}

#[test]
fn only_option_is_let_through_and_terminates() {
    let m = MockModel::new(MockModelSpec {
        vocabulary: strs(&[" tapestry", " rug", " a"]),
        contexts: vec![],
        default: vec![(" tapestry".into(), 0.9995), (" rug".into(), 0.0005)],
    })
    .unwrap();
    let mut c = cfg();
    c.ban_strength = 0.2;
    c.min_p = 0.1;
    c.max_new_tokens = 10;
    let g = generate(&m, "", &phrases(&["tapestry"]), &c, 0).unwrap();
    assert!(g.text.contains("tapestry"));
    assert!(g.stats.lets_through > 0);
    assert!(g.events.iter().any(|e| e.let_through));
    assert_eq!(g.trace.len(), 10);
}

#[test]
fn force_backtrack_escapes_min_p() {
    let m = MockModel::new(MockModelSpec {
        vocabulary: strs(&[" tapestry", " rug"]),
        contexts: vec![],
        default: vec![(" tapestry".into(), 0.999), (" rug".into(), 0.001)],
    })
    .unwrap();
    let mut c = cfg();
    c.min_p = 0.1;
    c.max_new_tokens = 10;
    c.force_backtrack = true;
    let g = generate(&m, "", &phrases(&["tapestry"]), &c, 0).unwrap();
    assert!(!g.text.contains("tapestry"), "{}", g.text);
    assert_eq!(g.stats.lets_through, 0);
}

#[test]
fn deterministic_for_seed() {
    let m = princess();
    let ban = phrases(&["Elara", "the Princess Freya"]);
    let a = generate(&m, "Once", &ban, &cfg(), 11).unwrap();
    let b = generate(&m, "Once", &ban, &cfg(), 11).unwrap();
    assert_eq!(a.text, b.text);
    assert_eq!(a.events, b.events);
}

#[test]
fn batch_matches_sequential() {
    let m = princess();
    let ban = phrases(&["Elara"]);
    let prompts: Vec<PromptItem> = (0..6)
        .map(|i| PromptItem { id: format!("p{i}"), prompt: format!("Tale {i}:") })
        .collect();
    let par = generate_batch(&m, &prompts, &ban, &cfg(), 5, 3);
    for (i, r) in par.into_iter().enumerate() {
        let seq = generate(&m, &prompts[i].prompt, &ban, &cfg(), derive_seed(5, i as u64)).unwrap();
        assert_eq!(r.unwrap().text, seq.text);
    }
}

#[test]
fn stop_sequence_truncates() {
    let m = princess();
    let mut c = cfg();
    c.stop_sequences = vec![".".into()];
    let g = generate(&m, "Once", &Banlist::empty(), &c, 2).unwrap();
    assert!(!g.text.contains('.'));
}

#[test]
fn record_round_trip() {
    let m = princess();
    let g = generate(&m, "Once", &phrases(&["Elara"]), &cfg(), 1).unwrap();
    let e = &g.events[0];
    let rec = e.to_record("g0");
    let json = serde_json::to_string(&rec).unwrap();
    let back: EventRecord = serde_json::from_str(&json).unwrap();
    assert_eq!(back, rec);
    let ev = back.to_event();
    assert_eq!(ev.chosen_candidates, e.chosen_candidates);
}

#[test]
fn config_validation() {
    let mut c = cfg();
    c.ban_strength = 1.5;
    assert!(c.validate().is_err());
    let mut c = cfg();
    c.top_logprobs_count = 1;
    assert!(c.validate().is_err());
}
