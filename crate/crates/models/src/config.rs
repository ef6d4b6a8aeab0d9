use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use vexel_core::codec::{EmbedTables, DEFAULT_D_TOK, DEFAULT_SEQ_LEN};
use vexel_core::conditioning::DEFAULT_D_P;
use vexel_core::normalize::DEFAULT_CANVAS;
use vexel_nn::LrSchedule;

/// Version written into every config; other values are rejected.
pub const CONFIG_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Parse(String),
    #[error("config schema_version {0} is not supported (expected {CONFIG_SCHEMA})")]
    Schema(u32),
    #[error("config: {0}")]
    Invalid(String),
    #[error("config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup: u64,
    pub floor_lr: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            peak_lr: 3e-4,
            warmup: 2000,
            floor_lr: 1.5e-5,
            weight_decay: 0.1,
            max_grad_norm: 2.0,
        }
    }
}

impl OptimConfig {
    pub fn schedule(&self, total_steps: u64) -> LrSchedule {
        LrSchedule {
            warmup: self.warmup,
            peak: self.peak_lr,
            floor: self.floor_lr,
            total_steps,
        }
    }
}

/// Space in which reconstruction error is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossSpace {
    /// Full embedded token vectors.
    Embedding,
    /// The concatenated pre-projection vectors (token tables plus raw
    /// normalized continuous cells).
    Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub schema_version: u32,
    /// Self-attention layers in the encoder and in the decoder.
    pub layers: usize,
    pub ff_dim: usize,
    pub d_e: usize,
    pub d_p: usize,
    pub d_z: usize,
    pub heads: usize,
    pub kl_weight: f64,
    /// Rendering-sequence stages per training document.
    pub stages: usize,
    pub seq_len: usize,
    pub d_tok: usize,
    pub canvas: u32,
    pub embed_seed: u64,
    pub loss_space: LossSpace,
    pub optim: OptimConfig,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            schema_version: CONFIG_SCHEMA,
            layers: 4,
            ff_dim: 512,
            d_e: 256,
            d_p: DEFAULT_D_P,
            d_z: 16,
            heads: 4,
            kl_weight: 1e-4,
            stages: 8,
            seq_len: DEFAULT_SEQ_LEN,
            d_tok: DEFAULT_D_TOK,
            canvas: DEFAULT_CANVAS,
            embed_seed: 0,
            loss_space: LossSpace::Embedding,
            optim: OptimConfig::default(),
        }
    }
}

impl VaeConfig {
    /// Desk-scale configuration used by the overfit experiments.
    pub fn tiny() -> Self {
        VaeConfig {
            layers: 2,
            d_e: 64,
            d_z: 8,
            stages: 4,
            seq_len: 32,
            d_tok: 16,
            optim: OptimConfig {
                peak_lr: 2e-3,
                warmup: 100,
                floor_lr: 1e-5,
                weight_decay: 0.0,
                max_grad_norm: 2.0,
            },
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        check_schema(self.schema_version)?;
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.layers == 0 {
            return invalid("layers must be at least 1".into());
        }
        if self.heads == 0
            || !self.d_e.is_multiple_of(self.heads)
            || !(self.d_e / self.heads).is_multiple_of(2)
        {
            return invalid(format!(
                "d_e {} must split into {} even-width heads",
                self.d_e, self.heads
            ));
        }
        if self.d_tok < 7 || self.d_e <= EmbedTables::concat_width(self.d_tok) {
            return invalid(format!(
                "d_e {} must exceed 2*d_tok+12 with d_tok >= 7 (d_tok {})",
                self.d_e, self.d_tok
            ));
        }
        if self.stages == 0
            || self.seq_len < 2
            || self.d_z == 0
            || self.d_p == 0
            || self.ff_dim == 0
        {
            return invalid(
                "stages, d_z, d_p, ff_dim must be positive and seq_len at least 2".into(),
            );
        }
        if self.canvas == 0 {
            return invalid("canvas must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DitConfig {
    pub schema_version: u32,
    pub blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_ratio: usize,
    pub t_diff: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub freq_dim: usize,
    pub d_txt: usize,
    pub t_txt: usize,
    pub cond_dropout: f64,
    pub cfg_scale: f64,
    pub sample_steps: usize,
    pub batch_size: usize,
    /// Latent shape, copied from the VAE the model is trained against.
    pub d_z: usize,
    pub seq_len: usize,
    /// Multiplier that brings training latents to unit variance.
    pub latent_scale: f64,
    pub optim: OptimConfig,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self::with_size(12, 384, 6)
    }
}

impl DitConfig {
    fn with_size(blocks: usize, hidden: usize, heads: usize) -> Self {
        let vae = VaeConfig::default();
        DitConfig {
            schema_version: CONFIG_SCHEMA,
            blocks,
            hidden,
            heads,
            ff_ratio: 4,
            t_diff: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            freq_dim: 64,
            d_txt: 64,
            t_txt: 16,
            cond_dropout: 0.1,
            cfg_scale: 4.0,
            sample_steps: 100,
            batch_size: 8,
            d_z: vae.d_z,
            seq_len: vae.seq_len,
            latent_scale: 1.0,
            optim: OptimConfig::default(),
        }
    }

    /// Named sizes: `(blocks, hidden, heads)` of S, B, L and tiny.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "S" => Some(Self::with_size(12, 384, 6)),
            "B" => Some(Self::with_size(12, 768, 12)),
            "L" => Some(Self::with_size(24, 1024, 16)),
            "tiny" => {
                let vae = VaeConfig::tiny();
                Some(DitConfig {
                    d_txt: 32,
                    t_txt: 4,
                    d_z: vae.d_z,
                    seq_len: vae.seq_len,
                    optim: OptimConfig {
                        peak_lr: 2e-3,
                        warmup: 100,
                        floor_lr: 1e-5,
                        weight_decay: 0.0,
                        max_grad_norm: 2.0,
                    },
                    ..Self::with_size(2, 64, 2)
                })
            }
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        check_schema(self.schema_version)?;
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.blocks == 0 {
            return invalid("blocks must be at least 1".into());
        }
        if self.heads == 0
            || !self.hidden.is_multiple_of(self.heads)
            || !(self.hidden / self.heads).is_multiple_of(2)
        {
            return invalid(format!(
                "hidden {} must split into {} even-width heads",
                self.hidden, self.heads
            ));
        }
        if self.t_diff == 0 || self.sample_steps == 0 || self.sample_steps > self.t_diff {
            return invalid("sample_steps must be in 1..=t_diff".into());
        }
        if !(0.0 < self.beta_start && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return invalid("betas must satisfy 0 < beta_start < beta_end < 1".into());
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return invalid("cond_dropout must be a probability".into());
        }
        if self.freq_dim == 0 || !self.freq_dim.is_multiple_of(2) {
            return invalid("freq_dim must be even and positive".into());
        }
        if self.d_txt == 0
            || self.t_txt == 0
            || self.d_z == 0
            || self.seq_len == 0
            || self.batch_size == 0
        {
            return invalid("d_txt, t_txt, d_z, seq_len, batch_size must be positive".into());
        }
        if !(self.latent_scale.is_finite() && self.latent_scale > 0.0) {
            return invalid("latent_scale must be positive".into());
        }
        Ok(())
    }
}

fn check_schema(v: u32) -> Result<(), ConfigError> {
    if v == CONFIG_SCHEMA {
        Ok(())
    } else {
        Err(ConfigError::Schema(v))
    }
}

/// Parses JSON config text; missing keys take defaults, unknown keys fail.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T, ConfigError> {
    serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
}

pub trait ModelConfig: DeserializeOwned + Serialize + Sized {
    fn named(name: &str) -> Option<Self>;
    fn check(&self) -> Result<(), ConfigError>;
}

impl ModelConfig for VaeConfig {
    fn named(name: &str) -> Option<Self> {
        Self::preset(name)
    }
    fn check(&self) -> Result<(), ConfigError> {
        self.validate()
    }
}

impl ModelConfig for DitConfig {
    fn named(name: &str) -> Option<Self> {
        Self::preset(name)
    }
    fn check(&self) -> Result<(), ConfigError> {
        self.validate()
    }
}

/// Resolves a preset name or a JSON file path into a validated config.
pub fn load_config<T: ModelConfig>(spec: &str) -> Result<T, ConfigError> {
    let cfg = match T::named(spec) {
        Some(c) => c,
        None => {
            let text = fs::read_to_string(Path::new(spec)).map_err(|source| ConfigError::Io {
                path: spec.to_string(),
                source,
            })?;
            parse_config(&text)?
        }
    };
    cfg.check()?;
    Ok(cfg)
}
