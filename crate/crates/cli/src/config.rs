//! Pipeline configuration. Key names follow the auto-antislop YAML layout;
//! keys for stages this tool does not run (server management, training)
//! are accepted with a warning and dropped.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use antislop_core::ftpo::FtpoLossParams;
use antislop_core::metrics::DiversityOptions;
use antislop_core::profiler::{ProfileOptions, Quotas};
use antislop_core::sampler::SamplerConfig;

const IGNORED_KEYS: &[&str] = &[
    "manage_vllm",
    "generation_hf_dataset_name",
    "generation_hf_dataset_split",
    "generation_chat_template_model_id",
    "generation_logging_level",
    "generation_system_prompt",
    "generation_refusal_detection",
    "finetune_enabled",
    "finetune_use_unsloth",
    "finetune_base_model_id",
    "finetune_max_seq_length",
    "finetune_load_in_4bit",
    "finetune_early_stopping_loss",
    "finetune_lora_r",
    "finetune_lora_alpha",
    "finetune_lora_dropout",
    "finetune_weight_decay",
    "finetune_target_modules",
    "finetune_freeze_early_layers",
    "finetune_n_layers_unfrozen",
    "finetune_gradient_checkpointing",
    "finetune_chat_template",
    "finetune_batch_size",
    "finetune_gradient_accumulation_steps",
    "finetune_warmup_ratio",
    "finetune_num_epochs",
    "finetune_learning_rate",
    "finetune_auto_learning_rate",
    "finetune_auto_learning_rate_adjustment_scaling",
    "finetune_beta",
    "finetune_output_dir_suffix",
    "finetune_save_merged_16bit",
    "finetune_save_gguf_q8_0",
    "finetune_max_train_examples",
    "finetune_shuffle_seed",
    "top_n_initial_slop_ban",
    "top_n_subsequent_slop_ban",
];

fn is_ignored(key: &str) -> bool {
    key.starts_with("vllm_") || IGNORED_KEYS.contains(&key)
}

fn d_base_dir() -> PathBuf {
    "results/auto_antislop_runs".into()
}
fn d_log_level() -> String {
    "INFO".into()
}
fn d_iterations() -> usize {
    2
}
fn d_true() -> bool {
    true
}
fn d_max_new_tokens() -> usize {
    1000
}
fn d_threads() -> usize {
    50
}
fn d_max_prompts() -> usize {
    2000
}
fn d_chunk() -> usize {
    20
}
fn d_top_logprobs() -> usize {
    20
}
fn d_one() -> f64 {
    1.0
}
fn d_top_k() -> Option<usize> {
    Some(50)
}
fn d_min_p() -> f64 {
    0.01
}
fn d_timeout() -> u64 {
    480
}
fn d_template() -> String {
    "Writing prompt: {prompt}\n\nWrite 1000 words to this prompt. Your response:\n".into()
}
fn d_language() -> String {
    "english".into()
}
fn d_min_word_len() -> usize {
    3
}
fn d_top_k_ngrams() -> Option<usize> {
    Some(5000)
}
fn d_top_k_words() -> Option<usize> {
    Some(200_000)
}
fn d_dict_ngrams() -> usize {
    300
}
fn d_nodict_ngrams() -> usize {
    200
}
fn d_dict_words() -> usize {
    920
}
fn d_nodict_words() -> usize {
    80
}
fn d_min_phrase_freq() -> u64 {
    2
}
fn d_mode() -> String {
    "ftpo".into()
}
fn d_wins() -> f64 {
    0.85
}
fn d_rej_strength() -> f64 {
    0.8
}
fn d_cho_strength() -> f64 {
    0.2
}
fn d_min_chosen() -> usize {
    4
}
fn d_lambda_target() -> f64 {
    0.05
}
fn d_tau() -> f64 {
    0.5
}
fn d_lambda() -> f64 {
    0.4
}
fn d_margin() -> f64 {
    2.0
}
fn d_hdd() -> usize {
    42
}
fn d_mattr() -> usize {
    500
}
fn d_max_backtracks() -> usize {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "d_base_dir")]
    pub experiment_base_dir: PathBuf,
    #[serde(default)]
    pub human_profile_path: Option<PathBuf>,
    #[serde(default)]
    pub human_ngram_profile_path: Option<PathBuf>,
    #[serde(default = "d_log_level")]
    pub log_level: String,
    #[serde(default = "d_iterations")]
    pub num_iterations: usize,
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub seed: u64,

    #[serde(default = "d_true")]
    pub generation_step_enabled: bool,
    #[serde(default)]
    pub generation_api_base_url: Option<String>,
    #[serde(default)]
    pub generation_model_id: Option<String>,
    #[serde(default)]
    pub generation_api_key: Option<String>,
    #[serde(default)]
    pub generation_mock_spec_path: Option<PathBuf>,
    #[serde(default)]
    pub generation_prompts_path: Option<PathBuf>,
    #[serde(default)]
    pub generation_banlist_path: Option<PathBuf>,
    #[serde(default = "d_max_new_tokens")]
    pub generation_max_new_tokens: usize,
    #[serde(default = "d_threads")]
    pub generation_threads: usize,
    #[serde(default = "d_max_prompts")]
    pub generation_max_prompts: usize,
    #[serde(default = "d_chunk")]
    pub generation_param_chunk_size: usize,
    #[serde(default = "d_top_logprobs")]
    pub generation_param_top_logprobs_count: usize,
    #[serde(default = "d_one")]
    pub generation_param_temperature: f64,
    #[serde(default = "d_one")]
    pub generation_param_top_p: f64,
    #[serde(default = "d_top_k")]
    pub generation_param_top_k: Option<usize>,
    #[serde(default = "d_min_p")]
    pub generation_param_min_p: f64,
    #[serde(default = "d_timeout")]
    pub generation_param_timeout: u64,
    #[serde(default)]
    pub generation_param_stop_sequences: Vec<String>,
    #[serde(default = "d_template")]
    pub generation_prompt_template: String,
    #[serde(default)]
    pub generation_force_backtrack: bool,
    #[serde(default = "d_one")]
    pub generation_ban_strength: f64,
    #[serde(default = "d_max_backtracks")]
    pub generation_max_backtracks: usize,
    #[serde(default = "d_true")]
    pub generation_ngram_remove_stopwords: bool,
    #[serde(default = "d_language")]
    pub generation_ngram_language: String,

    #[serde(default)]
    pub profile_corpus_path: Option<PathBuf>,
    #[serde(default)]
    pub profile_compare_paths: Vec<PathBuf>,
    #[serde(default = "d_true")]
    pub enable_ngram_ban: bool,
    #[serde(default = "d_min_word_len")]
    pub min_word_len_for_analysis: usize,
    #[serde(default = "d_top_k_ngrams")]
    pub top_k_bigrams: Option<usize>,
    #[serde(default = "d_top_k_ngrams")]
    pub top_k_trigrams: Option<usize>,
    #[serde(default = "d_dict_ngrams")]
    pub dict_bigrams_initial: usize,
    #[serde(default)]
    pub dict_bigrams_subsequent: usize,
    #[serde(default = "d_nodict_ngrams")]
    pub nodict_bigrams_initial: usize,
    #[serde(default)]
    pub nodict_bigrams_subsequent: usize,
    #[serde(default = "d_dict_ngrams")]
    pub dict_trigrams_initial: usize,
    #[serde(default)]
    pub dict_trigrams_subsequent: usize,
    #[serde(default = "d_nodict_ngrams")]
    pub nodict_trigrams_initial: usize,
    #[serde(default)]
    pub nodict_trigrams_subsequent: usize,
    #[serde(default)]
    pub extra_ngrams_to_ban: Vec<String>,
    #[serde(default = "d_true")]
    pub compute_overrep_words: bool,
    #[serde(default = "d_top_k_words")]
    pub top_k_words_for_overrep_analysis: Option<usize>,
    #[serde(default = "d_dict_words")]
    pub dict_overrep_initial: usize,
    #[serde(default)]
    pub dict_overrep_subsequent: usize,
    #[serde(default = "d_nodict_words")]
    pub nodict_overrep_initial: usize,
    #[serde(default)]
    pub nodict_overrep_subsequent: usize,
    #[serde(default = "d_true")]
    pub enable_slop_phrase_ban: bool,
    #[serde(default = "d_min_phrase_freq")]
    pub min_phrase_freq_to_keep: u64,
    #[serde(default)]
    pub extra_slop_phrases_to_ban: Vec<String>,
    #[serde(default)]
    pub whitelist_strings: Vec<String>,
    #[serde(default)]
    pub extra_regex_patterns: Vec<String>,

    #[serde(default = "d_mode")]
    pub finetune_mode: String,
    #[serde(default)]
    pub finetune_ftpo_dataset: Option<PathBuf>,
    #[serde(default = "d_wins")]
    pub finetune_early_stopping_wins: f64,
    #[serde(default)]
    pub ftpo_events_path: Option<PathBuf>,
    #[serde(default)]
    pub ftpo_corpus_path: Option<PathBuf>,
    #[serde(default)]
    pub ftpo_min_dataset_size: usize,
    #[serde(default)]
    pub ftpo_reference_mock_spec_path: Option<PathBuf>,
    #[serde(default)]
    pub ftpo_policy_mock_spec_path: Option<PathBuf>,
    #[serde(default = "d_rej_strength")]
    pub ftpo_sample_rejected_regularisation_strength: f64,
    #[serde(default = "d_cho_strength")]
    pub ftpo_sample_chosen_regularisation_strength: f64,
    #[serde(default = "d_min_chosen")]
    pub ftpo_sample_min_chosen_tokens: usize,
    #[serde(default = "d_lambda_target")]
    pub ftpo_lambda_mse_target: f64,
    #[serde(default = "d_tau")]
    pub ftpo_tau_mse_target: f64,
    #[serde(default = "d_lambda")]
    pub ftpo_lambda_mse: f64,
    #[serde(default = "d_margin")]
    pub ftpo_clip_epsilon_logits: f64,
    #[serde(default)]
    pub ftpo_detach_taper_weight: bool,

    #[serde(default)]
    pub eval_baseline_corpus_path: Option<PathBuf>,
    #[serde(default)]
    pub eval_treated_corpus_path: Option<PathBuf>,
    #[serde(default)]
    pub eval_banlist_path: Option<PathBuf>,
    #[serde(default = "d_hdd")]
    pub eval_hdd_sample_size: usize,
    #[serde(default = "d_mattr")]
    pub eval_mattr_window: usize,
}

/// A parsed config plus the keys that were dropped.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: Config,
    pub ignored: Vec<String>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

/// Null values read as "unset", which for keys with a default means the
/// default applies.
pub fn parse(source: &str) -> anyhow::Result<(Config, Vec<String>)> {
    let value: serde_yaml::Value = serde_yaml::from_str(source).context("config is not valid YAML")?;
    let map = match value {
        serde_yaml::Value::Mapping(m) => m,
        serde_yaml::Value::Null => serde_yaml::Mapping::new(),
        _ => bail!("config must be a mapping of keys to values"),
    };
    let known = known_keys();
    let mut kept = serde_yaml::Mapping::new();
    let mut ignored = Vec::new();
    for (k, v) in map {
        let key = k.as_str().context("config keys must be strings")?.to_string();
        if is_ignored(&key) {
            ignored.push(key);
        } else if known.contains(&key.as_str()) {
            if !v.is_null() || nullable(&key) {
                kept.insert(serde_yaml::Value::String(key), v);
            }
        } else {
            bail!("unknown config key `{key}`");
        }
    }
    let config: Config =
        serde_yaml::from_value(serde_yaml::Value::Mapping(kept)).context("invalid config value")?;
    config.validate()?;
    Ok((config, ignored))
}

fn nullable(key: &str) -> bool {
    matches!(key, "generation_param_top_k" | "top_k_bigrams" | "top_k_trigrams" | "top_k_words_for_overrep_analysis")
}

fn known_keys() -> Vec<&'static str> {
    // Field names of `Config`, read from its serialized default.
    static KEYS: std::sync::OnceLock<Vec<String>> = std::sync::OnceLock::new();
    KEYS.get_or_init(|| {
        let v = serde_json::to_value(Config::default()).expect("config serializes");
        v.as_object().expect("config is an object").keys().cloned().collect()
    })
    .iter()
    .map(String::as_str)
    .collect()
}

impl Default for Config {
    fn default() -> Self {
        serde_yaml::from_str("{}").expect("defaults deserialize")
    }
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Loaded> {
        let raw = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let (config, ignored) = parse(&raw).with_context(|| format!("in config {}", path.display()))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Loaded { config, ignored, base_dir })
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.generation_ngram_language != "english" {
            bail!("generation_ngram_language: only \"english\" stopwords are bundled");
        }
        if self.finetune_mode != "ftpo" {
            bail!("finetune_mode: only \"ftpo\" is supported");
        }
        if self.num_iterations < 1 {
            bail!("num_iterations must be at least 1");
        }
        if !self.generation_prompt_template.contains("{prompt}") {
            bail!("generation_prompt_template must contain {{prompt}}");
        }
        self.sampler().validate().map_err(|e| anyhow::anyhow!("generation_param_*: {e}"))?;
        self.loss_params().validate().map_err(|e| anyhow::anyhow!("ftpo_*: {e}"))?;
        for (k, s) in [
            ("ftpo_sample_rejected_regularisation_strength", self.ftpo_sample_rejected_regularisation_strength),
            ("ftpo_sample_chosen_regularisation_strength", self.ftpo_sample_chosen_regularisation_strength),
        ] {
            if !(0.0..=1.0).contains(&s) {
                bail!("{k} must be in [0, 1], got {s}");
            }
        }
        Ok(())
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            ban_strength: self.generation_ban_strength,
            min_p: self.generation_param_min_p,
            temperature: self.generation_param_temperature,
            top_p: self.generation_param_top_p,
            top_k: self.generation_param_top_k,
            chunk_size: self.generation_param_chunk_size,
            top_logprobs_count: self.generation_param_top_logprobs_count,
            force_backtrack: self.generation_force_backtrack,
            max_new_tokens: self.generation_max_new_tokens,
            stop_sequences: self.generation_param_stop_sequences.clone(),
            max_backtracks: self.generation_max_backtracks,
        }
    }

    pub fn loss_params(&self) -> FtpoLossParams {
        FtpoLossParams {
            m: self.ftpo_clip_epsilon_logits,
            tau_target: self.ftpo_tau_mse_target,
            lambda_target: self.ftpo_lambda_mse_target,
            lambda_nontarget: self.ftpo_lambda_mse,
            detach_taper_weight: self.ftpo_detach_taper_weight,
        }
    }

    pub fn profile_options(&self) -> ProfileOptions {
        ProfileOptions {
            min_word_len: self.min_word_len_for_analysis,
            min_phrase_freq: self.min_phrase_freq_to_keep,
            top_k_words: self.top_k_words_for_overrep_analysis,
            top_k_bigrams: self.top_k_bigrams,
            top_k_trigrams: self.top_k_trigrams,
            ..ProfileOptions::default()
        }
    }

    fn gate(&self, mut q: Quotas) -> Quotas {
        if !(self.compute_overrep_words && self.enable_slop_phrase_ban) {
            q.dict_words = 0;
            q.nodict_words = 0;
        }
        if !self.enable_ngram_ban {
            q.dict_bigrams = 0;
            q.nodict_bigrams = 0;
            q.dict_trigrams = 0;
            q.nodict_trigrams = 0;
        }
        q
    }

    pub fn initial_quotas(&self) -> Quotas {
        self.gate(Quotas {
            dict_words: self.dict_overrep_initial,
            nodict_words: self.nodict_overrep_initial,
            dict_bigrams: self.dict_bigrams_initial,
            nodict_bigrams: self.nodict_bigrams_initial,
            dict_trigrams: self.dict_trigrams_initial,
            nodict_trigrams: self.nodict_trigrams_initial,
        })
    }

    pub fn subsequent_quotas(&self) -> Quotas {
        self.gate(Quotas {
            dict_words: self.dict_overrep_subsequent,
            nodict_words: self.nodict_overrep_subsequent,
            dict_bigrams: self.dict_bigrams_subsequent,
            nodict_bigrams: self.nodict_bigrams_subsequent,
            dict_trigrams: self.dict_trigrams_subsequent,
            nodict_trigrams: self.nodict_trigrams_subsequent,
        })
    }

    pub fn diversity_options(&self) -> DiversityOptions {
        DiversityOptions { mattr_window: self.eval_mattr_window, hdd_sample_size: self.eval_hdd_sample_size }
    }
}
