//! Run configuration: one TOML file drives data generation, training,
//! inference and evaluation. Flag overrides happen at the CLI; the resolved
//! config is echoed next to every run's outputs.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::causal::CausalConfig;
use crate::diffusion::ScheduleKind;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::scenario::ScenarioConfig;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { kind: ScheduleKind::Linear, steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<crate::diffusion::NoiseSchedule> {
        crate::diffusion::NoiseSchedule::new(self.kind, self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: u8,
    pub steps: u64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch: usize,
    pub lambda: f64,
    pub gamma: f64,
    /// Hook attachment preset for stage 2.
    pub hooks: String,
    /// Stage-2 override: update every parameter instead of TA + blocks only.
    pub train_all: bool,
    pub manifest: Option<String>,
    pub checkpoint_in: Option<String>,
    pub checkpoint_out: Option<String>,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 0,
            steps: 2000,
            lr: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            batch: 2,
            lambda: 0.2,
            gamma: 0.3,
            hooks: "full".to_string(),
            train_all: false,
            manifest: None,
            checkpoint_in: None,
            checkpoint_out: None,
            checkpoint_every: 500,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub ddim_steps: usize,
    pub eta: f64,
    /// V2V edit strength s in (0, 1]: the source is noised to round(s * K).
    pub strength: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { ddim_steps: 50, eta: 0.0, strength: 0.6 }
    }
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub model: BackboneConfig,
    pub encoder: EncoderConfig,
    pub causal: CausalConfig,
    pub scenario: ScenarioConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Write the fully resolved config next to a run's outputs.
    pub fn echo_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("resolved_config.toml"), self.to_toml())?;
        Ok(())
    }

    /// Hash over the model-defining sections; stages refuse to chain across
    /// disagreeing hashes.
    pub fn model_hash(&self) -> String {
        #[derive(serde::Serialize)]
        struct ModelParts<'a> {
            schedule: &'a ScheduleConfig,
            model: &'a BackboneConfig,
            encoder: &'a EncoderConfig,
            causal: &'a CausalConfig,
        }
        let parts = ModelParts {
            schedule: &self.schedule,
            model: &self.model,
            encoder: &self.encoder,
            causal: &self.causal,
        };
        let toml = toml::to_string(&parts).expect("model parts serialize");
        let mut hasher = Sha256::new();
        hasher.update(toml.as_bytes());
        hex_string(&hasher.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.causal.validate()?;
        if self.encoder.text_dim != self.model.text_dim {
            return Err(Error::config(format!(
                "encoder text_dim {} must match model text_dim {}",
                self.encoder.text_dim, self.model.text_dim
            )));
        }
        if self.encoder.vision_tokens != self.causal.n_tokens
            || self.encoder.vision_dim != self.causal.token_dim
        {
            return Err(Error::config(
                "encoder vision tokens/dim must match the causal token grid",
            ));
        }
        if self.encoder.text_dim != self.causal.token_dim {
            return Err(Error::config(
                "grounding requires text_dim == token_dim (shared answer space)",
            ));
        }
        if self.scenario.frames != self.model.frames
            || self.scenario.height != self.model.height
            || self.scenario.width != self.model.width
        {
            return Err(Error::config(
                "scenario resolution/frames must match the model configuration",
            ));
        }
        let side = (self.causal.n_tokens as f64).sqrt() as usize;
        if self.model.height % side != 0 || self.model.width % side != 0 {
            return Err(Error::config(format!(
                "frame resolution {}x{} not divisible by the {side}x{side} token grid",
                self.model.height, self.model.width
            )));
        }
        if !(0.0 < self.infer.strength && self.infer.strength <= 1.0) {
            return Err(Error::config("edit strength must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.infer.eta) {
            return Err(Error::config("eta must lie in [0, 1]"));
        }
        if self.train.stage > 2 {
            return Err(Error::config("stage must be 0, 1 or 2"));
        }
        if self.train.batch == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }

    /// Patch width for the gaze tokenizer so its grid matches the causal
    /// token grid.
    pub fn gaze_patch(&self) -> usize {
        let side = (self.causal.n_tokens as f64).sqrt() as usize;
        self.model.height / side
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
