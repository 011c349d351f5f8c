//! Run configuration: model dimensions, training schedule, and the file both
//! are loaded from. Every field has a default, so a minimal run file only
//! names the dataset.

use crate::datagen::split::SplitSpec;
use crate::datagen::GenConfig;
use crate::hash::fnv1a64;
use crate::tensor::AdamConfig;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    M2m,
    SingleTask,
    SharedBottom,
    Mmoe,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::M2m => "m2m",
            Variant::SingleTask => "single_task",
            Variant::SharedBottom => "shared_bottom",
            Variant::Mmoe => "mmoe",
        }
    }

    pub fn parse(s: &str) -> Result<Variant, ConfigError> {
        match s {
            "m2m" => Ok(Variant::M2m),
            "single_task" => Ok(Variant::SingleTask),
            "shared_bottom" => Ok(Variant::SharedBottom),
            "mmoe" => Ok(Variant::Mmoe),
            other => Err(ConfigError::Invalid(format!(
                "unknown variant '{other}' (expected m2m, single_task, shared_bottom, mmoe)"
            ))),
        }
    }
}

/// What a bare `m2m --config run.toml` invocation does; an explicit CLI verb
/// overrides it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Train,
    Eval,
    Ablate,
    Sweep,
    GenData,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateLink {
    /// softplus(z) + 1e-6: positive, linear tail, stable with count labels.
    Softplus,
    /// exp(z) + 1e-6: canonical Poisson link, kept for comparison.
    Exp,
}

/// Shape of the featurized data the model is built against; derived from the
/// dataset, not chosen. Serialized with checkpoints so a loaded model can
/// validate compatibility.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct DataShape {
    pub n_behavior: usize,
    pub n_performance: usize,
    pub n_tasks: usize,
    pub n_scenarios: usize,
    /// Vocabulary size per scenario-attribute field.
    pub scenario_attr_vocab: Vec<usize>,
    /// Vocabulary size per profile field.
    pub profile_vocab: Vec<usize>,
    /// Bucket count shared by all sequence channels.
    pub seq_buckets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding width per categorical field.
    pub d_input: usize,
    /// Positional embedding width (concatenated, not added).
    pub d_pos: usize,
    pub heads: usize,
    /// Expert view width.
    pub d_view: usize,
    pub n_experts: usize,
    /// Scenario knowledge width d_s.
    pub d_scenario: usize,
    /// Affine+LeakyReLU layers in the scenario encoder; 2 gives one hidden
    /// layer.
    pub scenario_depth: usize,
    /// Width of the generated networks; [expert view ∥ anchor] is projected
    /// down to this before any meta unit runs.
    pub d_meta: usize,
    /// Layers per meta unit (K).
    pub meta_depth: usize,
    /// Residual layers per tower (L).
    pub tower_layers: usize,
    /// Days of history consumed; the featurizer takes the most recent
    /// `window` rows of each sequence.
    pub window: usize,
    pub leaky_slope: f64,
    pub rate_link: RateLink,
    /// Replace scenario-generated attention with a static learned score.
    pub disable_meta_attention: bool,
    /// Replace meta residual towers with static towers.
    pub disable_meta_tower: bool,
    /// Replace self-attention with a mean over embedded timesteps.
    pub disable_transformer: bool,
    #[serde(skip_serializing_if = "is_default_shape")]
    pub shape: DataShape,
}

fn is_default_shape(s: &DataShape) -> bool {
    *s == DataShape::default()
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            d_input: 16,
            d_pos: 8,
            heads: 2,
            d_view: 256,
            n_experts: 4,
            d_scenario: 64,
            scenario_depth: 2,
            d_meta: 64,
            meta_depth: 3,
            tower_layers: 2,
            window: 40,
            leaky_slope: 0.01,
            rate_link: RateLink::Softplus,
            disable_meta_attention: false,
            disable_meta_tower: false,
            disable_transformer: false,
            shape: DataShape::default(),
        }
    }
}

impl ModelConfig {
    /// Per-timestep embedded width of the behavior sequence.
    pub fn d_model_behavior(&self) -> usize {
        self.shape.n_behavior * self.d_input + self.d_pos
    }

    pub fn d_model_performance(&self) -> usize {
        self.shape.n_performance * self.d_input + self.d_pos
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError::Invalid(m));
        for (name, v) in [
            ("d_input", self.d_input),
            ("d_pos", self.d_pos),
            ("heads", self.heads),
            ("d_view", self.d_view),
            ("n_experts", self.n_experts),
            ("d_scenario", self.d_scenario),
            ("scenario_depth", self.scenario_depth),
            ("d_meta", self.d_meta),
            ("meta_depth", self.meta_depth),
            ("window", self.window),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return err(format!("leaky_slope {} must sit in (0, 1)", self.leaky_slope));
        }
        if self.shape.n_tasks == 0 || self.shape.n_scenarios == 0 {
            return err("model shape missing: build the config against a dataset".into());
        }
        for (label, d) in [
            ("behavior", self.d_model_behavior()),
            ("performance", self.d_model_performance()),
        ] {
            if d % self.heads != 0 {
                return err(format!(
                    "{label} width {d} (channels * d_input + d_pos) must divide by {} heads",
                    self.heads
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Per-task weights; empty means 1.0 everywhere.
    pub task_weights: Vec<f64>,
    /// Weight on the squared norms of both parameter groups.
    pub reg_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> LossConfig {
        LossConfig {
            task_weights: Vec::new(),
            reg_alpha: 1e-4,
        }
    }
}

impl LossConfig {
    pub fn weight(&self, task: usize) -> f64 {
        self.task_weights.get(task).copied().unwrap_or(1.0)
    }

    pub fn validate(&self, n_tasks: usize) -> Result<(), ConfigError> {
        if !self.task_weights.is_empty() && self.task_weights.len() != n_tasks {
            return Err(ConfigError::Invalid(format!(
                "{} task weights for {} tasks",
                self.task_weights.len(),
                n_tasks
            )));
        }
        if self.task_weights.iter().any(|w| *w < 0.0) || self.reg_alpha < 0.0 {
            return Err(ConfigError::Invalid(
                "task weights and reg_alpha must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Gradient components clamp to [-clip, clip] before each step.
    pub clip: f64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 10,
            batch_size: 256,
            seed: 17,
            clip: 3.0,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ConfigError::Invalid(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.clip > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "clip {} must be positive",
                self.clip
            )));
        }
        Ok(())
    }
}

/// The declarative run file (TOML). Paths resolve relative to the process
/// working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub mode: Mode,
    pub variant: Variant,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    /// Generator settings for `gen-data`.
    pub gen: GenConfig,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            dataset: PathBuf::from("panel.jsonl"),
            out_dir: PathBuf::from("runs"),
            mode: Mode::default(),
            variant: Variant::M2m,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            gen: GenConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ConfigError> {
        let text =
            toml::to_string_pretty(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Stable fingerprint of the fully resolved configuration. Stamped on
    /// every output so results trace back to exact settings.
    pub fn hash(&self) -> u64 {
        let canon = serde_json::to_vec(self).expect("config serializes");
        fnv1a64(&canon)
    }
}
