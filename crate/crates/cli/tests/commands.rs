use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn base_config() -> String {
    std::fs::read_to_string(fixture("pipeline.yaml")).unwrap()
}

/// Write `yaml` next to copies of the fixture inputs and run a subcommand.
fn run(dir: &Path, yaml: &str, args: &[&str]) -> Output {
    for f in ["story_model.json", "prompts.jsonl", "human_words.tsv", "human_ngrams.tsv"] {
        std::fs::copy(fixture(f), dir.join(f)).unwrap();
    }
    let cfg = dir.join("config.yaml");
    std::fs::write(&cfg, yaml).unwrap();
    Command::new(env!("CARGO_BIN_EXE_antislop"))
        .arg("--config")
        .arg(&cfg)
        .args(["--log-level", "warn"])
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().filter(|l| !l.trim().is_empty()).count()
}

fn without(yaml: &str, key: &str) -> String {
    yaml.lines().filter(|l| !l.starts_with(&format!("{key}:"))).collect::<Vec<_>>().join("\n")
}

#[test]
fn missing_baseline_names_the_key() {
    let d = tempfile::tempdir().unwrap();
    let yaml = format!("{}\nprofile_corpus_path: corpus.jsonl\n", without(&base_config(), "human_profile_path"));
    std::fs::write(d.path().join("corpus.jsonl"), "{\"prompt_id\":\"a\",\"text\":\"tapestry\"}\n").unwrap();
    let o = run(d.path(), &yaml, &["--out", d.path().join("out").to_str().unwrap(), "profile"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("human_profile_path"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &format!("{}\ngeneration_temprature: 0.5\n", base_config()), &["generate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("generation_temprature"));
}

#[test]
fn generate_writes_corpus_events_and_manifest() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("gen");
    let yaml = format!("{}\ngeneration_max_prompts: 3\n", without(&base_config(), "generation_max_prompts"));
    let o = run(d.path(), &yaml, &["--out", out.to_str().unwrap(), "generate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(lines(&out.join("corpus.jsonl")), 3);
    assert!(lines(&out.join("events.jsonl")) > 0);
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["seed"], 1234);
    assert!(m["inputs"]["generation_mock_spec_path"]["sha256"].as_str().unwrap().len() == 64);
    let stats = json(&out.join("stats.json"));
    assert!(stats["totals"].get("elapsed_ms").is_none());
    assert!(out.join("timing.json").is_file());
}

#[test]
fn zero_prompts_is_an_empty_run() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("gen");
    let yaml = format!("{}\ngeneration_max_prompts: 0\n", base_config());
    let o = run(d.path(), &yaml, &["--out", out.to_str().unwrap(), "generate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(lines(&out.join("corpus.jsonl")), 0);
}

#[test]
fn seed_flag_overrides_config() {
    let d = tempfile::tempdir().unwrap();
    let yaml = format!("{}\ngeneration_max_prompts: 2\n", base_config());
    let a = d.path().join("a");
    let b = d.path().join("b");
    assert!(run(d.path(), &yaml, &["--out", a.to_str().unwrap(), "generate"]).status.success());
    assert!(run(d.path(), &yaml, &["--out", b.to_str().unwrap(), "--seed", "99", "generate"]).status.success());
    assert_eq!(json(&b.join("manifest.json"))["seed"], 99);
    assert_ne!(std::fs::read(a.join("corpus.jsonl")).unwrap(), std::fs::read(b.join("corpus.jsonl")).unwrap());
}

#[test]
fn zero_quotas_keep_only_extras() {
    let d = tempfile::tempdir().unwrap();
    let gen = d.path().join("gen");
    let cfg = base_config();
    assert!(run(d.path(), &format!("{cfg}\ngeneration_max_prompts: 6\n"), &["--out", gen.to_str().unwrap(), "generate"])
        .status
        .success());
    let mut yaml: String = cfg
        .lines()
        .filter(|l| !(l.contains("_initial:") || l.contains("_subsequent:")))
        .collect::<Vec<_>>()
        .join("\n");
    for k in ["dict_overrep", "nodict_overrep", "dict_bigrams", "nodict_bigrams", "dict_trigrams", "nodict_trigrams"] {
        yaml.push_str(&format!("\n{k}_initial: 0\n{k}_subsequent: 0"));
    }
    yaml.push_str(&format!("\nextra_slop_phrases_to_ban: [\"door\"]\nprofile_corpus_path: {}\n", gen.join("corpus.jsonl").display()));
    yaml.push_str(&format!("profile_compare_paths: [{}]\n", gen.join("corpus.jsonl").display()));
    let out = d.path().join("prof");
    let o = run(d.path(), &yaml, &["--out", out.to_str().unwrap(), "profile"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ban = json(&out.join("banlist.json"));
    assert_eq!(ban["slop_phrases"], serde_json::json!(["door"]));
    assert_eq!(ban["ngrams"], serde_json::json!([]));
    let csv = std::fs::read_to_string(out.join("distance_matrix.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().ends_with(",0,0"), "{csv}");
}

#[test]
fn strict_chosen_minimum_gives_an_empty_dataset() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("run");
    let yaml = format!(
        "{}\nftpo_sample_min_chosen_tokens: 100\nftpo_min_dataset_size: 10\n",
        without(&without(&base_config(), "ftpo_sample_min_chosen_tokens"), "ftpo_min_dataset_size")
    );
    let o = run(d.path(), &yaml, &["--out", out.to_str().unwrap(), "pipeline"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&out.join("dataset/ftpo_report.json"));
    assert_eq!(r["kept"], 0);
    assert_eq!(r["below_minimum"], true);
    assert_eq!(lines(&out.join("dataset/ftpo.jsonl")), 0);
    assert!(stderr(&o).contains("below the minimum"));
}

#[test]
fn pipeline_then_standalone_stages_agree() {
    let d = tempfile::tempdir().unwrap();
    let run_dir = d.path().join("run");
    assert!(run(d.path(), &base_config(), &["--out", run_dir.to_str().unwrap(), "pipeline"]).status.success());
    let eval = json(&run_dir.join("reports/eval.json"));
    assert!(eval["suppression"]["percent"].as_f64().unwrap() > 90.0);

    // standalone ftpo over iteration 1 events and the banlist active there
    let mut yaml = base_config();
    yaml.push_str(&format!(
        "\nftpo_events_path: {r}/iter_1/events.jsonl\nftpo_corpus_path: {r}/iter_1/corpus.jsonl\ngeneration_banlist_path: {r}/iter_1/banlist_active.json\n",
        r = run_dir.display()
    ));
    let ft = d.path().join("ftpo");
    let o = run(d.path(), &yaml, &["--out", ft.to_str().unwrap(), "ftpo"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep = json(&ft.join("ftpo_report.json"));
    assert_eq!(rep["events"].as_u64().unwrap() as usize, lines(&run_dir.join("iter_1/events.jsonl")));
    assert!(rep["captured"].as_u64().unwrap() > 0);
    assert!(rep["batch"]["n_evaluated"].as_u64().unwrap() > 0);

    // a corpus against itself shows no suppression
    let c = run_dir.join("iter_0/corpus.jsonl");
    let yaml = format!(
        "{}\neval_baseline_corpus_path: {p}\neval_treated_corpus_path: {p}\neval_banlist_path: {b}\n",
        base_config(),
        p = c.display(),
        b = run_dir.join("iter_0/banlist.json").display()
    );
    let ev = d.path().join("eval");
    let o = run(d.path(), &yaml, &["--out", ev.to_str().unwrap(), "eval"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(&ev.join("eval.json"));
    assert_eq!(r["suppression"]["percent"], 0.0);
    assert_eq!(r["diversity_vs_baseline"], 100.0);
    assert!(std::fs::read_to_string(ev.join("eval_docs.csv")).unwrap().starts_with("corpus,index,"));
}

#[test]
fn show_config_round_trips() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &base_config(), &["show-config"]);
    assert!(o.status.success());
    let y: serde_yaml::Value = serde_yaml::from_slice(&o.stdout).unwrap();
    assert_eq!(y["num_iterations"], serde_yaml::Value::from(3));
    assert!(y.get("vllm_gpu_memory_utilization").is_none());
}

fn one_shot_server(body: &'static str) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1", listener.local_addr().unwrap());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut s) = stream else { break };
            let mut r = BufReader::new(s.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                if r.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
            }
            let mut buf = vec![0; len];
            let _ = r.read_exact(&mut buf);
            let _ = write!(s, "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len());
        }
    });
    url
}

#[test]
fn endpoint_without_logprobs_fails_before_generation() {
    let d = tempfile::tempdir().unwrap();
    let url = one_shot_server(r#"{"choices":[{"text":"hi","finish_reason":"length"}]}"#);
    let yaml = format!("{}\ngeneration_api_base_url: {url}\n", without(&base_config(), "generation_mock_spec_path"));
    let out = d.path().join("out");
    let o = run(d.path(), &yaml, &["--out", out.to_str().unwrap(), "generate"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("logprobs"));
    assert!(!out.join("corpus.jsonl").exists());
}

#[test]
fn unreachable_endpoint_exits_with_transport_code() {
    let d = tempfile::tempdir().unwrap();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let yaml = format!(
        "{}\ngeneration_api_base_url: http://127.0.0.1:{port}/v1\n",
        without(&base_config(), "generation_mock_spec_path")
    );
    let o = run(d.path(), &yaml, &["--out", d.path().join("out").to_str().unwrap(), "generate"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
