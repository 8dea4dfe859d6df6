use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;

use antislop_core::backend::{Backend, BackendError, ChunkRequest, EndpointConfig, HttpBackend, MockModel, MockModelSpec};
use antislop_core::ftpo::{self, BatchReport, FtpoSample, MockLogitProvider};
use antislop_core::metrics::{self, DiversityReport, DocRow, SuppressionReport};
use antislop_core::pattern::{Banlist, BanlistFile};
use antislop_core::profiler::{self, Baseline, Baselines, Fingerprint, Quotas, SlopProfile};
use antislop_core::sampler::{generate_batch, EventRecord, GenerationStats, PromptItem};

use crate::config::{Config, Loaded};
use crate::io::{self, CorpusRecord, Manifest, PromptRecord};

pub struct Ctx {
    pub cfg: Config,
    pub base_dir: PathBuf,
    pub seed: u64,
    pub out: PathBuf,
    pub manifest: Manifest,
}

impl Ctx {
    pub fn new(loaded: Loaded, command: &str, seed: Option<u64>, out: Option<PathBuf>) -> anyhow::Result<Self> {
        let Loaded { config: mut cfg, ignored, base_dir } = loaded;
        for key in &ignored {
            tracing::warn!(key = %key, "config key is outside this tool's scope; ignored");
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let canonical = serde_json::to_vec(&cfg)?;
        let manifest = Manifest::new(command, cfg.seed, io::sha256_hex(&canonical));
        let out = match out {
            Some(o) => o,
            None => {
                let base = resolve(&base_dir, &cfg.experiment_base_dir);
                base.join(format!("run-{}-seed{}", &manifest.config_sha256[..12], cfg.seed))
            }
        };
        Ok(Self { seed: cfg.seed, cfg, base_dir, out, manifest })
    }

    pub fn path(&self, p: &Option<PathBuf>) -> Option<PathBuf> {
        p.as_ref().map(|p| resolve(&self.base_dir, p))
    }

    fn input(&mut self, key: &str, p: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
        let path = io::require_file(key, self.path(p).as_ref())?;
        self.manifest.add_input(key, &path)?;
        Ok(path)
    }

    fn optional_input(&mut self, key: &str, p: &Option<PathBuf>) -> anyhow::Result<Option<PathBuf>> {
        match p {
            None => Ok(None),
            Some(_) => self.input(key, p).map(Some),
        }
    }

    pub fn write_manifest(&self) -> anyhow::Result<()> {
        io::mkdir(&self.out)?;
        io::write_json(&self.out.join("manifest.json"), &self.manifest)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// User-supplied bans and whitelist from the config.
pub fn base_banlist(cfg: &Config) -> BanlistFile {
    BanlistFile {
        slop_phrases: if cfg.enable_slop_phrase_ban { cfg.extra_slop_phrases_to_ban.clone() } else { Vec::new() },
        ngrams: if cfg.enable_ngram_ban {
            cfg.extra_ngrams_to_ban
                .iter()
                .map(|g| g.split_whitespace().map(str::to_string).collect())
                .collect()
        } else {
            Vec::new()
        },
        regex_patterns: cfg.extra_regex_patterns.clone(),
        whitelist: cfg.whitelist_strings.clone(),
    }
}

fn compile(cfg: &Config, b: &BanlistFile) -> anyhow::Result<Banlist> {
    b.compile(cfg.min_word_len_for_analysis).context("invalid banlist")
}

fn load_baselines(ctx: &mut Ctx) -> anyhow::Result<Baselines> {
    let cfg = ctx.cfg.clone();
    let words = ctx.input("human_profile_path", &cfg.human_profile_path)?;
    let mut all = Baseline::load(&words)?;
    match ctx.optional_input("human_ngram_profile_path", &cfg.human_ngram_profile_path)? {
        Some(p) => all.per_million.extend(Baseline::load(&p)?.per_million),
        None => tracing::warn!("no human_ngram_profile_path; every n-gram will be treated as nodict"),
    }
    Ok(Baselines::from_mixed(&all))
}

fn corpus_pairs(records: &[CorpusRecord]) -> Vec<(String, String)> {
    records.iter().map(|r| (r.prompt_id.clone(), r.text.clone())).collect()
}

fn texts(records: &[CorpusRecord]) -> Vec<String> {
    records.iter().map(|r| r.text.clone()).collect()
}

/// Base bans plus the top profile entries under `quotas`.
fn banlist_from_profile(cfg: &Config, previous: &BanlistFile, profile: &SlopProfile, quotas: &Quotas) -> BanlistFile {
    let additions = profiler::build_banlist(profile, quotas, &cfg.whitelist_strings, previous);
    let mut next = previous.clone();
    next.extend_unique(&additions);
    next
}

pub fn cmd_profile(ctx: &mut Ctx) -> anyhow::Result<()> {
    let cfg = ctx.cfg.clone();
    let baselines = load_baselines(ctx)?;
    let corpus_path = ctx.input("profile_corpus_path", &cfg.profile_corpus_path)?;
    let records: Vec<CorpusRecord> = io::read_jsonl(&corpus_path)?;
    let opts = cfg.profile_options();
    let profile = profiler::build_profile(&corpus_pairs(&records), &baselines, &opts)?;
    let base = base_banlist(&cfg);
    let banlist = banlist_from_profile(&cfg, &base, &profile, &cfg.initial_quotas());
    compile(&cfg, &banlist)?;
    ctx.write_manifest()?;
    io::write_json(&ctx.out.join("profile.json"), &profile)?;
    banlist.save(ctx.out.join("banlist.json"))?;

    if !cfg.profile_compare_paths.is_empty() {
        let mut labels = vec![label(&corpus_path)];
        let mut fps: Vec<Fingerprint> = vec![profile.fingerprint.clone()];
        for (i, p) in cfg.profile_compare_paths.iter().enumerate() {
            let path = ctx.input(&format!("profile_compare_paths[{i}]"), &Some(p.clone()))?;
            let recs: Vec<CorpusRecord> = io::read_jsonl(&path)?;
            fps.push(profiler::build_profile(&corpus_pairs(&recs), &baselines, &opts)?.fingerprint);
            labels.push(label(&path));
        }
        write_matrix(&ctx.out.join("distance_matrix.csv"), &labels, &profiler::distance_matrix(&fps))?;
        ctx.write_manifest()?;
    }
    tracing::info!(
        phrases = banlist.slop_phrases.len(),
        ngrams = banlist.ngrams.len(),
        regexes = banlist.regex_patterns.len(),
        "profile written"
    );
    Ok(())
}

fn label(p: &Path) -> String {
    p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn write_matrix(path: &Path, labels: &[String], m: &[Vec<f64>]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut header = vec!["corpus".to_string()];
    header.extend(labels.iter().cloned());
    w.write_record(&header)?;
    for (l, row) in labels.iter().zip(m) {
        let mut rec = vec![l.clone()];
        rec.extend(row.iter().map(|d| d.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn make_backend(ctx: &mut Ctx) -> anyhow::Result<Box<dyn Backend>> {
    let cfg = ctx.cfg.clone();
    if cfg.generation_mock_spec_path.is_some() {
        let p = ctx.input("generation_mock_spec_path", &cfg.generation_mock_spec_path)?;
        let model = MockModel::new(MockModelSpec::load(&p)?)?;
        return Ok(Box::new(model));
    }
    let Some(url) = &cfg.generation_api_base_url else {
        bail!("set `generation_mock_spec_path` or `generation_api_base_url`");
    };
    let mut ep = EndpointConfig::new(url.clone());
    ep.api_key = cfg.generation_api_key.clone();
    ep.model = cfg.generation_model_id.clone().or(cfg.model_id.clone());
    ep.timeout = std::time::Duration::from_secs(cfg.generation_param_timeout);
    ep.max_in_flight = cfg.generation_threads;
    let backend = HttpBackend::new(ep)?;
    probe(&backend, &cfg)?;
    Ok(Box::new(backend))
}

/// One-token request to confirm the endpoint returns top logprobs.
fn probe(backend: &dyn Backend, cfg: &Config) -> Result<(), BackendError> {
    let req = ChunkRequest {
        prompt_text: "Hello".into(),
        max_tokens: 1,
        temperature: cfg.generation_param_temperature,
        top_p: cfg.generation_param_top_p,
        top_k: cfg.generation_param_top_k,
        min_p: cfg.generation_param_min_p,
        top_logprobs: cfg.generation_param_top_logprobs_count,
        stop_sequences: Vec::new(),
        seed: Some(cfg.seed),
    };
    backend.next_chunk(&req).map(|_| ())
}

fn load_prompts(ctx: &mut Ctx) -> anyhow::Result<Vec<PromptItem>> {
    let cfg = ctx.cfg.clone();
    if cfg.generation_max_prompts == 0 {
        return Ok(Vec::new());
    }
    let p = ctx.input("generation_prompts_path", &cfg.generation_prompts_path)?;
    let recs: Vec<PromptRecord> = io::read_jsonl(&p)?;
    Ok(recs
        .into_iter()
        .take(cfg.generation_max_prompts)
        .enumerate()
        .map(|(i, r)| PromptItem {
            id: r.id.unwrap_or_else(|| i.to_string()),
            prompt: cfg.generation_prompt_template.replace("{prompt}", &r.prompt),
        })
        .collect())
}

#[derive(Debug, Serialize)]
struct StatsReport {
    generations: usize,
    failed: usize,
    efficiency: f64,
    totals: serde_json::Value,
}

pub struct GenOutput {
    pub corpus: Vec<CorpusRecord>,
    pub events: Vec<EventRecord>,
}

/// Run generation into `dir`. Successful generations are written even when
/// some fail; the first failure is returned afterwards.
fn run_generate(
    ctx: &Ctx,
    backend: &dyn Backend,
    prompts: &[PromptItem],
    banlist: &BanlistFile,
    dir: &Path,
    gen_prefix: &str,
) -> anyhow::Result<GenOutput> {
    let cfg = &ctx.cfg;
    let compiled = compile(cfg, banlist)?;
    let results = generate_batch(backend, prompts, &compiled, &cfg.sampler(), ctx.seed, cfg.generation_threads);
    let mut corpus = Vec::new();
    let mut events = Vec::new();
    let mut totals = GenerationStats::default();
    let mut first_err = None;
    let mut failed = 0;
    for (i, (p, r)) in prompts.iter().zip(results).enumerate() {
        let gid = format!("{gen_prefix}g{i}");
        match r {
            Ok(g) => {
                events.extend(g.events.iter().map(|e| e.to_record(&gid)));
                totals.accumulate(&g.stats);
                corpus.push(CorpusRecord { prompt_id: p.id.clone(), generation_id: gid, prompt: p.prompt.clone(), text: g.text });
            }
            Err(e) => {
                failed += 1;
                tracing::error!(prompt = %p.id, error = %e, "generation failed");
                first_err.get_or_insert(e);
            }
        }
    }
    io::mkdir(dir)?;
    io::write_jsonl(&dir.join("corpus.jsonl"), &corpus)?;
    io::write_jsonl(&dir.join("events.jsonl"), &events)?;
    banlist.save(dir.join("banlist_active.json"))?;
    let elapsed = totals.elapsed_ms;
    let mut totals_json = serde_json::to_value(&totals)?;
    if let Some(o) = totals_json.as_object_mut() {
        o.remove("elapsed_ms");
    }
    io::write_json(
        &dir.join("stats.json"),
        &StatsReport { generations: corpus.len(), failed, efficiency: totals.efficiency(), totals: totals_json },
    )?;
    io::write_json(&dir.join("timing.json"), &serde_json::json!({ "elapsed_ms": elapsed }))?;
    tracing::info!(
        generations = corpus.len(),
        backtracks = totals.backtracks,
        lets_through = totals.lets_through,
        "generation written to {}",
        dir.display()
    );
    if let Some(e) = first_err {
        return Err(anyhow::Error::new(e).context(format!("{failed} generation(s) failed; partial results written")));
    }
    Ok(GenOutput { corpus, events })
}

fn active_banlist(ctx: &mut Ctx) -> anyhow::Result<BanlistFile> {
    let cfg = ctx.cfg.clone();
    let mut b = base_banlist(&cfg);
    if let Some(p) = ctx.optional_input("generation_banlist_path", &cfg.generation_banlist_path)? {
        b.extend_unique(&BanlistFile::load(&p)?);
    }
    Ok(b)
}

pub fn cmd_generate(ctx: &mut Ctx) -> anyhow::Result<()> {
    let banlist = active_banlist(ctx)?;
    compile(&ctx.cfg, &banlist)?;
    let prompts = load_prompts(ctx)?;
    let backend = make_backend(ctx)?;
    ctx.write_manifest()?;
    run_generate(ctx, backend.as_ref(), &prompts, &banlist, &ctx.out.clone(), "")?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct FtpoReport {
    events: usize,
    let_through_events: usize,
    captured: usize,
    kept: usize,
    min_dataset_size: usize,
    below_minimum: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    batch: Option<BatchReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reached_target_accuracy: Option<bool>,
}

fn logit_provider(ctx: &mut Ctx) -> anyhow::Result<Option<MockLogitProvider>> {
    let cfg = ctx.cfg.clone();
    let Some(r) = ctx.optional_input("ftpo_reference_mock_spec_path", &cfg.ftpo_reference_mock_spec_path)? else {
        return Ok(None);
    };
    let reference = MockModel::new(MockModelSpec::load(&r)?)?;
    let policy = match ctx.optional_input("ftpo_policy_mock_spec_path", &cfg.ftpo_policy_mock_spec_path)? {
        Some(p) => MockModel::new(MockModelSpec::load(&p)?)?,
        None => reference.clone(),
    };
    Ok(Some(MockLogitProvider::new(policy, reference).map_err(anyhow::Error::msg)?))
}

/// `events` are paired with the banlist that was active when they fired.
fn run_ftpo(
    ctx: &mut Ctx,
    batches: &[(Vec<EventRecord>, BanlistFile)],
    prompts: &BTreeMap<String, String>,
    dir: &Path,
) -> anyhow::Result<Vec<FtpoSample>> {
    let cfg = ctx.cfg.clone();
    let mut samples = Vec::new();
    let mut n_events = 0;
    let mut n_let = 0;
    for (events, banlist) in batches {
        let compiled = compile(&cfg, banlist)?;
        for rec in events {
            n_events += 1;
            n_let += usize::from(rec.let_through);
            let prompt = prompts
                .get(&rec.generation_id)
                .with_context(|| format!("event for unknown generation `{}`", rec.generation_id))?;
            if let Some(s) =
                ftpo::capture_sample(&rec.to_event(), prompt, &rec.generation_id, &compiled, cfg.ftpo_sample_min_chosen_tokens)
            {
                samples.push(s);
            }
        }
    }
    let captured = samples.len();
    let kept = ftpo::regularize_dataset(
        &samples,
        cfg.ftpo_sample_rejected_regularisation_strength,
        cfg.ftpo_sample_chosen_regularisation_strength,
        ctx.seed,
    )?;
    let below_minimum = kept.len() < cfg.ftpo_min_dataset_size || kept.is_empty();
    if below_minimum {
        tracing::warn!(kept = kept.len(), minimum = cfg.ftpo_min_dataset_size, "FTPO dataset is below the minimum size");
    }
    let batch = logit_provider(ctx)?.map(|p| ftpo::batch_eval(&kept, &p, &cfg.loss_params()));
    let reached_target_accuracy = batch.as_ref().map(|b| b.pref_accuracy >= cfg.finetune_early_stopping_wins);
    io::mkdir(dir)?;
    ftpo::write_dataset(&kept, dir.join("ftpo.jsonl"))?;
    io::write_json(
        &dir.join("ftpo_report.json"),
        &FtpoReport {
            events: n_events,
            let_through_events: n_let,
            captured,
            kept: kept.len(),
            min_dataset_size: cfg.ftpo_min_dataset_size,
            below_minimum,
            batch,
            reached_target_accuracy,
        },
    )?;
    Ok(kept)
}

fn prompt_map(corpus: &[CorpusRecord]) -> BTreeMap<String, String> {
    corpus.iter().map(|r| (r.generation_id.clone(), r.prompt.clone())).collect()
}

pub fn cmd_ftpo(ctx: &mut Ctx) -> anyhow::Result<()> {
    let cfg = ctx.cfg.clone();
    let ev = ctx.input("ftpo_events_path", &cfg.ftpo_events_path)?;
    let corpus_path = ctx.input("ftpo_corpus_path", &cfg.ftpo_corpus_path)?;
    let events: Vec<EventRecord> = io::read_jsonl(&ev)?;
    let corpus: Vec<CorpusRecord> = io::read_jsonl(&corpus_path)?;
    let banlist = active_banlist(ctx)?;
    ctx.write_manifest()?;
    let out = ctx.out.clone();
    run_ftpo(ctx, &[(events, banlist)], &prompt_map(&corpus), &out)?;
    ctx.write_manifest()
}

#[derive(Debug, Serialize)]
struct EvalReport {
    suppression: SuppressionReport,
    baseline: DiversityReport,
    treated: DiversityReport,
    /// Treated aggregate with the baseline scaled to 100.
    diversity_vs_baseline: f64,
}

fn run_eval(cfg: &Config, baseline: &[String], treated: &[String], banlist: &BanlistFile, dir: &Path) -> anyhow::Result<()> {
    let compiled = compile(cfg, banlist)?;
    let suppression = metrics::suppression_rate(baseline, treated, &compiled)?;
    let opts = cfg.diversity_options();
    let b = metrics::diversity(baseline, &opts)?;
    let t = metrics::diversity(treated, &opts)?;
    let report = EvalReport { suppression, diversity_vs_baseline: t.normalized_aggregate(&b), baseline: b, treated: t };
    io::mkdir(dir)?;
    io::write_json(&dir.join("eval.json"), &report)?;
    let mut rows: Vec<DocRow> = metrics::document_rows("baseline", baseline, &compiled);
    rows.extend(metrics::document_rows("treated", treated, &compiled));
    let path = dir.join("eval_docs.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot create {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    tracing::info!(suppression = report.suppression.percent, diversity = report.diversity_vs_baseline, "evaluation written");
    Ok(())
}

pub fn cmd_eval(ctx: &mut Ctx) -> anyhow::Result<()> {
    let cfg = ctx.cfg.clone();
    let b = ctx.input("eval_baseline_corpus_path", &cfg.eval_baseline_corpus_path)?;
    let t = ctx.input("eval_treated_corpus_path", &cfg.eval_treated_corpus_path)?;
    let mut banlist = base_banlist(&cfg);
    if let Some(p) = ctx.optional_input("eval_banlist_path", &cfg.eval_banlist_path)? {
        banlist.extend_unique(&BanlistFile::load(&p)?);
    }
    let baseline: Vec<CorpusRecord> = io::read_jsonl(&b)?;
    let treated: Vec<CorpusRecord> = io::read_jsonl(&t)?;
    ctx.write_manifest()?;
    run_eval(&cfg, &texts(&baseline), &texts(&treated), &banlist, &ctx.out.clone())
}

/// Iteration 0 runs unconstrained; each later iteration generates under the
/// banlist grown so far and re-profiles its own output.
pub fn cmd_pipeline(ctx: &mut Ctx) -> anyhow::Result<()> {
    let cfg = ctx.cfg.clone();
    let baselines = load_baselines(ctx)?;
    let prompts = load_prompts(ctx)?;
    let backend = make_backend(ctx)?;
    ctx.write_manifest()?;
    let opts = cfg.profile_options();
    let out = ctx.out.clone();

    let base = base_banlist(&cfg);
    compile(&cfg, &base)?;
    let mut active = BanlistFile { whitelist: base.whitelist.clone(), ..Default::default() };
    let mut baseline_corpus = Vec::new();
    let mut last_corpus = Vec::new();
    let mut last_active = base.clone();
    let mut ftpo_batches = Vec::new();
    let mut prompts_by_gen = BTreeMap::new();

    for iter in 0..cfg.num_iterations {
        let dir = out.join(format!("iter_{iter}"));
        let gen = run_generate(ctx, backend.as_ref(), &prompts, &active, &dir, &format!("i{iter}-"))?;
        prompts_by_gen.extend(prompt_map(&gen.corpus));
        let next = if gen.corpus.is_empty() {
            if iter == 0 { base.clone() } else { active.clone() }
        } else {
            let profile = profiler::build_profile(&corpus_pairs(&gen.corpus), &baselines, &opts)?;
            io::write_json(&dir.join("profile.json"), &profile)?;
            if iter == 0 {
                banlist_from_profile(&cfg, &base, &profile, &cfg.initial_quotas())
            } else {
                banlist_from_profile(&cfg, &active, &profile, &cfg.subsequent_quotas())
            }
        };
        next.save(dir.join("banlist.json"))?;
        if iter == 0 {
            baseline_corpus = gen.corpus.clone();
            last_active = next.clone();
        } else {
            ftpo_batches.push((gen.events, active.clone()));
            last_active = active.clone();
        }
        last_corpus = gen.corpus;
        active = next;
    }

    run_ftpo(ctx, &ftpo_batches, &prompts_by_gen, &out.join("dataset"))?;
    if baseline_corpus.is_empty() {
        tracing::warn!("no generations; skipping evaluation");
    } else {
        run_eval(&cfg, &texts(&baseline_corpus), &texts(&last_corpus), &last_active, &out.join("reports"))?;
    }
    ctx.write_manifest()
}
