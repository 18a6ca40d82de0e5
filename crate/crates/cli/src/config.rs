//! Run configuration: flat dotted key-value text, one key per line.
//!
//! Every field has a default; unknown keys are rejected with their path.
//! The same key-value machinery applies ablation-grid overrides.

use thiserror::Error;

use tqd_core::dngen::{make_group_specs, DenoisingGroupSpec, DenoisingMode, GroupStrategy};
use tqd_core::sim::ScenarioConfig;
use tqd_core::tracker::{Paradigm, TrackerConfig};
use tqd_core::train::{DnMode, LossWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryInit {
    /// Copy the track query with the same instance ID (zero for new-borns).
    Track,
    /// Always start from the zero vector.
    Zero,
}

impl QueryInit {
    pub fn as_str(&self) -> &'static str {
        match self {
            QueryInit::Track => "track",
            QueryInit::Zero => "zero",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoisingRunConfig {
    pub mode: DnMode,
    pub strategy: GroupStrategy,
    pub n_groups: usize,
    pub lambda_center: f64,
    pub sigma_velo: f64,
    pub sigma_query: f64,
    pub alpha_fp: f64,
    pub alpha_drop: f64,
    pub assoc_loss: bool,
    pub query_init: QueryInit,
}

impl Default for DenoisingRunConfig {
    fn default() -> Self {
        DenoisingRunConfig {
            mode: DnMode::Temporal,
            strategy: GroupStrategy::Hybrid,
            n_groups: 5,
            lambda_center: 1.0,
            sigma_velo: 4.0,
            sigma_query: 0.1,
            alpha_fp: 0.1,
            alpha_drop: 0.0,
            assoc_loss: true,
            query_init: QueryInit::Track,
        }
    }
}

impl DenoisingRunConfig {
    pub fn base_spec(&self) -> DenoisingGroupSpec {
        DenoisingGroupSpec {
            lambda_center: self.lambda_center,
            sigma_velo: self.sigma_velo,
            sigma_query: self.sigma_query,
            alpha_fp: self.alpha_fp,
            alpha_drop: self.alpha_drop,
            mode: match self.mode {
                DnMode::Static => DenoisingMode::Static,
                _ => DenoisingMode::Temporal,
            },
        }
    }

    /// Expanded per-group specs; empty when denoising is off.
    pub fn group_specs(&self) -> Result<Vec<DenoisingGroupSpec>, ConfigError> {
        if self.mode == DnMode::Off {
            return Ok(Vec::new());
        }
        make_group_specs(self.strategy, self.n_groups, &self.base_spec()).map_err(|e| {
            ConfigError::Invalid {
                key: "denoising.n_groups".into(),
                message: e.to_string(),
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub steps: usize,
    pub snippet_length: usize,
    pub seed: u64,
    pub scenes: usize,
    pub lr: f64,
    pub lambda_dn: f64,
    pub w_box: f64,
    pub w_cls: f64,
    pub w_assoc: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 2000,
            snippet_length: 3,
            seed: 1,
            scenes: 64,
            lr: 2e-3,
            lambda_dn: 1.0,
            w_box: 1.0,
            w_cls: 1.0,
            w_assoc: 1.0,
        }
    }
}

impl TrainingConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_dn: self.lambda_dn,
            w_box: self.w_box,
            w_cls: self.w_cls,
            w_assoc: self.w_assoc,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub threshold: f64,
    pub scenes: usize,
    /// Seed for the evaluation scene set; fixed across ablation cells so
    /// every cell is scored on the same scenes.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: 2.0,
            scenes: 16,
            seed: 9000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub tracker: TrackerConfig,
    pub denoising: DenoisingRunConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key '{key}'")]
    UnknownKey { key: String },
    #[error("config key '{key}': {message}")]
    Invalid { key: String, message: String },
    #[error("config line {line}: expected key=value, got '{text}'")]
    Syntax { line: usize, text: String },
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e| ConfigError::Invalid {
        key: key.into(),
        message: format!("cannot parse '{value}': {e}"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim() {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        other => Err(ConfigError::Invalid {
            key: key.into(),
            message: format!("expected true/false, got '{other}'"),
        }),
    }
}

impl RunConfig {
    /// Applies one dotted key. Unknown keys are an error naming the path.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "scenario.arena" => self.scenario.arena = parse_num(key, value)?,
            "scenario.n_objects_init" => self.scenario.n_objects_init = parse_num(key, value)?,
            "scenario.birth_rate" => self.scenario.birth_rate = parse_num(key, value)?,
            "scenario.death_prob" => self.scenario.death_prob = parse_num(key, value)?,
            "scenario.dt" => self.scenario.dt = parse_num(key, value)?,
            "scenario.n_frames" => self.scenario.n_frames = parse_num(key, value)?,
            "scenario.accel_noise" => self.scenario.accel_noise = parse_num(key, value)?,
            "scenario.obs_pos_noise" => self.scenario.obs_pos_noise = parse_num(key, value)?,
            "scenario.miss_prob" => self.scenario.miss_prob = parse_num(key, value)?,
            "scenario.clutter_rate" => self.scenario.clutter_rate = parse_num(key, value)?,
            "tracker.paradigm" => {
                self.tracker.paradigm =
                    Paradigm::parse(value.trim()).ok_or_else(|| ConfigError::Invalid {
                        key: key.into(),
                        message: format!("expected tba|tbd|ada, got '{value}'"),
                    })?
            }
            "tracker.decoder_layers" => self.tracker.decoder_layers = parse_num(key, value)?,
            "tracker.feature_dim" => self.tracker.feature_dim = parse_num(key, value)?,
            "tracker.n_det_queries" => self.tracker.n_det_queries = parse_num(key, value)?,
            "tracker.tau_birth" => self.tracker.tau_birth = parse_num(key, value)?,
            "tracker.tau_out" => self.tracker.tau_out = parse_num(key, value)?,
            "tracker.max_miss" => self.tracker.max_miss = parse_num(key, value)?,
            "denoising.mode" => {
                self.denoising.mode =
                    DnMode::parse(value.trim()).ok_or_else(|| ConfigError::Invalid {
                        key: key.into(),
                        message: format!("expected off|static|temporal, got '{value}'"),
                    })?
            }
            "denoising.strategy" => {
                self.denoising.strategy = match value.trim() {
                    "general" => GroupStrategy::General,
                    "dedicated" => GroupStrategy::Dedicated,
                    "hybrid" => GroupStrategy::Hybrid,
                    other => {
                        return Err(ConfigError::Invalid {
                            key: key.into(),
                            message: format!("expected general|dedicated|hybrid, got '{other}'"),
                        })
                    }
                }
            }
            "denoising.n_groups" => self.denoising.n_groups = parse_num(key, value)?,
            "denoising.lambda_center" => self.denoising.lambda_center = parse_num(key, value)?,
            "denoising.sigma_velo" => self.denoising.sigma_velo = parse_num(key, value)?,
            "denoising.sigma_query" => self.denoising.sigma_query = parse_num(key, value)?,
            "denoising.alpha_fp" => self.denoising.alpha_fp = parse_num(key, value)?,
            "denoising.alpha_drop" => self.denoising.alpha_drop = parse_num(key, value)?,
            "denoising.assoc_loss" => self.denoising.assoc_loss = parse_bool(key, value)?,
            "denoising.query_init" => {
                self.denoising.query_init = match value.trim() {
                    "track" => QueryInit::Track,
                    "zero" => QueryInit::Zero,
                    other => {
                        return Err(ConfigError::Invalid {
                            key: key.into(),
                            message: format!("expected track|zero, got '{other}'"),
                        })
                    }
                }
            }
            "training.steps" => self.training.steps = parse_num(key, value)?,
            "training.snippet_length" => self.training.snippet_length = parse_num(key, value)?,
            "training.seed" => self.training.seed = parse_num(key, value)?,
            "training.scenes" => self.training.scenes = parse_num(key, value)?,
            "training.lr" => self.training.lr = parse_num(key, value)?,
            "training.lambda_dn" => self.training.lambda_dn = parse_num(key, value)?,
            "training.w_box" => self.training.w_box = parse_num(key, value)?,
            "training.w_cls" => self.training.w_cls = parse_num(key, value)?,
            "training.w_assoc" => self.training.w_assoc = parse_num(key, value)?,
            "eval.threshold" => self.eval.threshold = parse_num(key, value)?,
            "eval.scenes" => self.eval.scenes = parse_num(key, value)?,
            "eval.seed" => self.eval.seed = parse_num(key, value)?,
            _ => return Err(ConfigError::UnknownKey { key: key.into() }),
        }
        Ok(())
    }

    /// Parses `key=value` lines; '#' starts a comment.
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: lineno + 1,
                    text: raw.to_string(),
                });
            };
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Cross-field validation; call after all keys are applied.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scenario
            .validate()
            .map_err(|m| ConfigError::Invalid {
                key: "scenario".into(),
                message: m,
            })?;
        self.tracker.validate().map_err(|m| ConfigError::Invalid {
            key: "tracker".into(),
            message: m,
        })?;
        let _ = self.denoising.group_specs()?;
        if self.training.snippet_length < 2 {
            return Err(ConfigError::Invalid {
                key: "training.snippet_length".into(),
                message: "must be >= 2".into(),
            });
        }
        if self.training.snippet_length > self.scenario.n_frames {
            return Err(ConfigError::Invalid {
                key: "training.snippet_length".into(),
                message: format!("exceeds scenario.n_frames = {}", self.scenario.n_frames),
            });
        }
        if self.training.scenes == 0 || self.eval.scenes == 0 {
            return Err(ConfigError::Invalid {
                key: "training.scenes".into(),
                message: "scene counts must be >= 1".into(),
            });
        }
        if self.eval.threshold <= 0.0 {
            return Err(ConfigError::Invalid {
                key: "eval.threshold".into(),
                message: "must be > 0".into(),
            });
        }
        Ok(())
    }

    /// Canonical flat text: every key, sorted, one per line.
    pub fn canonical_text(&self) -> String {
        let strategy = match self.denoising.strategy {
            GroupStrategy::General => "general",
            GroupStrategy::Dedicated => "dedicated",
            GroupStrategy::Hybrid => "hybrid",
        };
        let pairs: Vec<(String, String)> = vec![
            ("denoising.alpha_drop".into(), trim_float(self.denoising.alpha_drop)),
            ("denoising.alpha_fp".into(), trim_float(self.denoising.alpha_fp)),
            ("denoising.assoc_loss".into(), self.denoising.assoc_loss.to_string()),
            ("denoising.lambda_center".into(), trim_float(self.denoising.lambda_center)),
            ("denoising.mode".into(), self.denoising.mode.as_str().into()),
            ("denoising.n_groups".into(), self.denoising.n_groups.to_string()),
            ("denoising.query_init".into(), self.denoising.query_init.as_str().into()),
            ("denoising.sigma_query".into(), trim_float(self.denoising.sigma_query)),
            ("denoising.sigma_velo".into(), trim_float(self.denoising.sigma_velo)),
            ("denoising.strategy".into(), strategy.into()),
            ("eval.scenes".into(), self.eval.scenes.to_string()),
            ("eval.seed".into(), self.eval.seed.to_string()),
            ("eval.threshold".into(), trim_float(self.eval.threshold)),
            ("scenario.accel_noise".into(), trim_float(self.scenario.accel_noise)),
            ("scenario.arena".into(), trim_float(self.scenario.arena)),
            ("scenario.birth_rate".into(), trim_float(self.scenario.birth_rate)),
            ("scenario.clutter_rate".into(), trim_float(self.scenario.clutter_rate)),
            ("scenario.death_prob".into(), trim_float(self.scenario.death_prob)),
            ("scenario.dt".into(), trim_float(self.scenario.dt)),
            ("scenario.miss_prob".into(), trim_float(self.scenario.miss_prob)),
            ("scenario.n_frames".into(), self.scenario.n_frames.to_string()),
            ("scenario.n_objects_init".into(), self.scenario.n_objects_init.to_string()),
            ("scenario.obs_pos_noise".into(), trim_float(self.scenario.obs_pos_noise)),
            ("tracker.decoder_layers".into(), self.tracker.decoder_layers.to_string()),
            ("tracker.feature_dim".into(), self.tracker.feature_dim.to_string()),
            ("tracker.max_miss".into(), self.tracker.max_miss.to_string()),
            ("tracker.n_det_queries".into(), self.tracker.n_det_queries.to_string()),
            ("tracker.paradigm".into(), self.tracker.paradigm.as_str().into()),
            ("tracker.tau_birth".into(), trim_float(self.tracker.tau_birth)),
            ("tracker.tau_out".into(), trim_float(self.tracker.tau_out)),
            ("training.lambda_dn".into(), trim_float(self.training.lambda_dn)),
            ("training.lr".into(), trim_float(self.training.lr)),
            ("training.scenes".into(), self.training.scenes.to_string()),
            ("training.seed".into(), self.training.seed.to_string()),
            ("training.snippet_length".into(), self.training.snippet_length.to_string()),
            ("training.steps".into(), self.training.steps.to_string()),
            ("training.w_assoc".into(), trim_float(self.training.w_assoc)),
            ("training.w_box".into(), trim_float(self.training.w_box)),
            ("training.w_cls".into(), trim_float(self.training.w_cls)),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(&k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

fn trim_float(v: f64) -> String {
    let s = format!("{v}");
    s
}
