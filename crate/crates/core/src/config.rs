//! Declarative run configuration: one TOML file drives every subcommand.
//! Unknown keys are rejected; flags and MOEGRAFT_* environment variables
//! override file values (flags win).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LangRole {
    Original,
    Expansion,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageConfig {
    pub tag: String,
    pub role: LangRole,
    pub seed: u64,
    pub n_tokens: usize,
    pub alphabet_lo: u8,
    pub alphabet_hi: u8,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Optional line-oriented UTF-8 source file; replaces generation.
    #[serde(default)]
    pub file: Option<PathBuf>,
}

fn default_temperature() -> f64 {
    0.4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    /// Scales expansion-language training tokens (the 2x-data knob).
    #[serde(default = "default_multiplier")]
    pub token_multiplier: f64,
    /// Fraction of original-language pretraining tokens drawn as a pilot
    /// sample of each expansion language (disjoint from its CPT corpus),
    /// so the base model's embeddings are not blind to the new alphabet.
    #[serde(default = "default_pilot_fraction")]
    pub pretrain_expansion_fraction: f64,
    pub languages: Vec<LanguageConfig>,
}

fn default_multiplier() -> f64 {
    1.0
}

fn default_pilot_fraction() -> f64 {
    0.01
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub eval_tokens: usize,
    pub replay_tokens: usize,
    pub echo_payloads: usize,
    pub payload_min: usize,
    pub payload_max: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    pub peak_lr: f64,
    #[serde(default = "default_warmup_frac")]
    pub warmup_frac: f64,
    #[serde(default = "default_floor_frac")]
    pub floor_frac: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Defaults to the data block's geometry when absent.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub seq_len: Option<usize>,
    #[serde(default = "default_replay_ratio")]
    pub replay_ratio: (u32, u32),
}

fn default_warmup_frac() -> f64 {
    0.03
}
fn default_floor_frac() -> f64 {
    0.1
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_replay_ratio() -> (u32, u32) {
    (1, 2)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagesConfig {
    pub pretrain: StageConfig,
    pub posttrain: StageConfig,
    pub cpt: StageConfig,
    pub router_tune: StageConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeStrategy {
    Delta,
    Avg,
    MoeAvg,
}

impl std::str::FromStr for MergeStrategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "delta" => Ok(MergeStrategy::Delta),
            "avg" => Ok(MergeStrategy::Avg),
            "moe_avg" => Ok(MergeStrategy::MoeAvg),
            other => Err(format!("unknown strategy {other:?} (expected delta, avg, or moe_avg)")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeConfig {
    pub strategy: MergeStrategy,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_lambda() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// 0 leaves the rayon pool at its default size.
    #[serde(default)]
    pub threads: usize,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub stages: StagesConfig,
    pub merge: MergeConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            threads: 0,
            model: ModelConfig {
                d_model: 64,
                ffn_dim: 128,
                n_layers: 2,
                n_heads: 4,
                vocab_size: crate::data::VOCAB_SIZE,
                max_seq_len: 128,
                n_experts: 4,
                top_k: 2,
                lb_alpha: 0.01,
            },
            data: DataConfig {
                batch_size: 32,
                seq_len: 128,
                token_multiplier: 1.0,
                pretrain_expansion_fraction: 0.01,
                languages: vec![
                    LanguageConfig {
                        tag: "orig_a".to_string(),
                        role: LangRole::Original,
                        seed: 101,
                        n_tokens: 2_000_000,
                        alphabet_lo: b'a',
                        alphabet_hi: b'z',
                        temperature: 0.4,
                        file: None,
                    },
                    LanguageConfig {
                        tag: "exp_x".to_string(),
                        role: LangRole::Expansion,
                        seed: 202,
                        n_tokens: 2_000_000,
                        alphabet_lo: b'A',
                        alphabet_hi: b'Z',
                        temperature: 0.4,
                        file: None,
                    },
                ],
            },
            eval: EvalConfig {
                eval_tokens: 131_072,
                replay_tokens: 262_144,
                echo_payloads: 200,
                payload_min: 1,
                payload_max: 8,
            },
            stages: StagesConfig {
                pretrain: StageConfig {
                    steps: None,
                    epochs: Some(1),
                    peak_lr: 2e-3,
                    warmup_frac: 0.03,
                    floor_frac: 0.1,
                    weight_decay: 0.01,
                    batch_size: None,
                    seq_len: None,
                    replay_ratio: (1, 2),
                },
                posttrain: StageConfig {
                    steps: Some(2100),
                    epochs: None,
                    peak_lr: 1e-3,
                    warmup_frac: 0.03,
                    floor_frac: 0.1,
                    weight_decay: 0.01,
                    batch_size: Some(32),
                    seq_len: Some(32),
                    replay_ratio: (1, 2),
                },
                cpt: StageConfig {
                    steps: None,
                    epochs: Some(1),
                    peak_lr: 2e-3,
                    warmup_frac: 0.03,
                    floor_frac: 0.1,
                    weight_decay: 0.01,
                    batch_size: None,
                    seq_len: None,
                    replay_ratio: (1, 2),
                },
                router_tune: StageConfig {
                    steps: Some(200),
                    epochs: None,
                    peak_lr: 1e-3,
                    warmup_frac: 0.03,
                    floor_frac: 0.1,
                    weight_decay: 0.01,
                    batch_size: None,
                    seq_len: None,
                    replay_ratio: (1, 2),
                },
            },
            merge: MergeConfig { strategy: MergeStrategy::Delta, lambda: 0.5 },
            paths: PathsConfig { workdir: PathBuf::from("work") },
        }
    }
}

/// Flag/env overrides; flags win over env, env wins over the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workdir: Option<PathBuf>,
    pub strategy: Option<MergeStrategy>,
    pub lambda: Option<f64>,
    pub token_multiplier: Option<f64>,
    pub threads: Option<usize>,
}

impl Overrides {
    /// Reads MOEGRAFT_* variables; malformed values are config errors.
    pub fn from_env() -> Result<Overrides> {
        let mut o = Overrides::default();
        let get = |name: &str| std::env::var(name).ok();
        if let Some(v) = get("MOEGRAFT_SEED") {
            o.seed = Some(v.parse().map_err(|_| invalid(format!("MOEGRAFT_SEED: bad integer {v:?}")))?);
        }
        if let Some(v) = get("MOEGRAFT_WORKDIR") {
            o.workdir = Some(PathBuf::from(v));
        }
        if let Some(v) = get("MOEGRAFT_STRATEGY") {
            o.strategy = Some(v.parse().map_err(ConfigError::Invalid)?);
        }
        if let Some(v) = get("MOEGRAFT_LAMBDA") {
            o.lambda = Some(v.parse().map_err(|_| invalid(format!("MOEGRAFT_LAMBDA: bad float {v:?}")))?);
        }
        if let Some(v) = get("MOEGRAFT_TOKEN_MULTIPLIER") {
            o.token_multiplier =
                Some(v.parse().map_err(|_| invalid(format!("MOEGRAFT_TOKEN_MULTIPLIER: bad float {v:?}")))?);
        }
        if let Some(v) = get("MOEGRAFT_THREADS") {
            o.threads = Some(v.parse().map_err(|_| invalid(format!("MOEGRAFT_THREADS: bad integer {v:?}")))?);
        }
        Ok(o)
    }

    /// Later overrides win where set.
    pub fn layered_over(self, weaker: Overrides) -> Overrides {
        Overrides {
            seed: self.seed.or(weaker.seed),
            workdir: self.workdir.or(weaker.workdir),
            strategy: self.strategy.or(weaker.strategy),
            lambda: self.lambda.or(weaker.lambda),
            token_multiplier: self.token_multiplier.or(weaker.token_multiplier),
            threads: self.threads.or(weaker.threads),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(w) = &o.workdir {
            self.paths.workdir = w.clone();
        }
        if let Some(s) = o.strategy {
            self.merge.strategy = s;
        }
        if let Some(l) = o.lambda {
            self.merge.lambda = l;
        }
        if let Some(m) = o.token_multiplier {
            self.data.token_multiplier = m;
        }
        if let Some(t) = o.threads {
            self.threads = t;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Full semantic validation; every subcommand calls this before work.
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| invalid(e.to_string()))?;
        if self.model.vocab_size < crate::data::VOCAB_SIZE {
            return Err(invalid(format!(
                "model.vocab_size must cover the byte tokenizer ({} ids)",
                crate::data::VOCAB_SIZE
            )));
        }
        if self.data.batch_size == 0 || self.data.seq_len < 2 {
            return Err(invalid("data.batch_size >= 1 and data.seq_len >= 2 required"));
        }
        if self.data.seq_len > self.model.max_seq_len {
            return Err(invalid("data.seq_len exceeds model.max_seq_len"));
        }
        if !(self.data.token_multiplier.is_finite() && self.data.token_multiplier > 0.0) {
            return Err(invalid("data.token_multiplier must be positive"));
        }
        if !(self.data.pretrain_expansion_fraction.is_finite())
            || !(0.0..1.0).contains(&self.data.pretrain_expansion_fraction)
        {
            return Err(invalid("data.pretrain_expansion_fraction must be in [0, 1)"));
        }
        if self.data.languages.is_empty() {
            return Err(invalid("at least one language required"));
        }
        let mut tags = std::collections::BTreeSet::new();
        for lang in &self.data.languages {
            if !tags.insert(lang.tag.clone()) {
                return Err(invalid(format!("duplicate language tag {:?}", lang.tag)));
            }
            if lang.alphabet_hi < lang.alphabet_lo {
                return Err(invalid(format!("language {:?}: alphabet_hi < alphabet_lo", lang.tag)));
            }
        }
        // Core alphabets may overlap only on shared punctuation/digit
        // bytes (0x20..=0x40).
        for (i, a) in self.data.languages.iter().enumerate() {
            for b in &self.data.languages[i + 1..] {
                let lo = a.alphabet_lo.max(b.alphabet_lo);
                let hi = a.alphabet_hi.min(b.alphabet_hi);
                if lo <= hi && !(lo >= 0x20 && hi <= 0x40) {
                    return Err(invalid(format!(
                        "languages {:?} and {:?} overlap outside the shared punctuation/digit range",
                        a.tag, b.tag
                    )));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.merge.lambda) {
            return Err(invalid("merge.lambda must be in [0, 1]"));
        }
        for (name, stage) in [
            ("pretrain", &self.stages.pretrain),
            ("posttrain", &self.stages.posttrain),
            ("cpt", &self.stages.cpt),
            ("router_tune", &self.stages.router_tune),
        ] {
            if stage.steps.is_none() && stage.epochs.is_none() {
                return Err(invalid(format!("stages.{name}: needs steps or epochs")));
            }
            if !(stage.peak_lr.is_finite() && stage.peak_lr >= 0.0) {
                return Err(invalid(format!("stages.{name}: peak_lr must be finite and >= 0")));
            }
            let t = stage.seq_len.unwrap_or(self.data.seq_len);
            if t < 2 || t > self.model.max_seq_len {
                return Err(invalid(format!("stages.{name}: seq_len out of range")));
            }
        }
        let post_t = self.stages.posttrain.seq_len.unwrap_or(self.data.seq_len);
        let max_payload = post_t.saturating_sub(3) / 2;
        if self.eval.payload_min == 0
            || self.eval.payload_max < self.eval.payload_min
            || self.eval.payload_max > max_payload
        {
            return Err(invalid(format!(
                "eval payload range [{}, {}] must fit 1..={max_payload} for posttrain seq_len {post_t}",
                self.eval.payload_min, self.eval.payload_max
            )));
        }
        if self.eval.eval_tokens < 1000 || self.eval.replay_tokens < 1000 {
            return Err(invalid("eval.eval_tokens and eval.replay_tokens must be >= 1000"));
        }
        if self.eval.echo_payloads == 0 {
            return Err(invalid("eval.echo_payloads must be >= 1"));
        }
        if self.data.languages.iter().all(|l| l.role != LangRole::Original) {
            return Err(invalid("at least one original-role language required"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let parsed: RunConfig = toml::from_str(&text).unwrap();
        parsed.validate().unwrap();
        assert_eq!(parsed.to_toml(), text);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = RunConfig::default().to_toml();
        text.push_str("\nbogus_key = 1\n");
        assert!(toml::from_str::<RunConfig>(&text).is_err());
        let nested = text.replace("[model]", "[model]\nnot_a_field = 2");
        assert!(toml::from_str::<RunConfig>(&nested).is_err());
    }

    #[test]
    fn overrides_apply_with_flag_priority() {
        let mut cfg = RunConfig::default();
        let env = Overrides { seed: Some(1), lambda: Some(0.25), ..Default::default() };
        let flags = Overrides { seed: Some(2), ..Default::default() };
        let merged = flags.layered_over(env);
        cfg.apply(&merged);
        assert_eq!(cfg.seed, 2);
        assert_eq!(cfg.merge.lambda, 0.25);
    }

    #[test]
    fn validation_catches_overlapping_alphabets() {
        let mut cfg = RunConfig::default();
        cfg.data.languages[1].alphabet_lo = b'a';
        cfg.data.languages[1].alphabet_hi = b'z';
        assert!(cfg.validate().is_err());
        // Overlap confined to shared punctuation/digits is allowed.
        cfg.data.languages[0].alphabet_lo = 0x20;
        cfg.data.languages[0].alphabet_hi = 0x40;
        cfg.data.languages[1].alphabet_lo = 0x30;
        cfg.data.languages[1].alphabet_hi = 0x5a;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn validation_catches_payload_overflow() {
        let mut cfg = RunConfig::default();
        cfg.eval.payload_max = 20; // needs 43 tokens, posttrain seq is 32
        assert!(cfg.validate().is_err());
    }
}
