//! Run configuration: one JSON document drives data generation, training and
//! inference. Unknown fields are rejected so typos fail loudly, and every
//! manifest written by the toolchain embeds the SHA-256 of the canonical
//! JSON encoding so outputs can be traced back to their exact settings.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CoreError;
use crate::Result;

/// Synthetic corpus settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Frames per clip; at least 2.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range for the number of moving shapes in stationary-mask clips.
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Per-axis speed cap for shapes, in whole pixels per frame.
    pub max_speed: i64,
    /// Per-axis speed cap for the background pan.
    pub bg_max_speed: i64,
    pub mask: MaskConfig,
}

/// Mask synthesis settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    /// Probability that a clip gets a stationary mask; the rest get
    /// object-tracking masks.
    pub stationary_fraction: f64,
    /// Coverage bounds for stationary masks, as a fraction of the frame.
    pub coverage_min: f64,
    pub coverage_max: f64,
    /// Dilation radius in pixels applied around tracked objects.
    pub object_dilation: usize,
}

/// Frame autoencoder settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    /// Latent channels per spatial cell.
    pub latent_channels: usize,
    /// Channel widths of the two encoder stages.
    pub widths: [usize; 2],
    pub groups: usize,
    /// Weight on the KL term of the training objective.
    pub kl_weight: f64,
    pub lr: f64,
    pub steps: usize,
    /// Frames drawn per optimization step.
    pub batch_frames: usize,
    pub seed: u64,
}

/// Noise schedule and sampler settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Deterministic sampler steps; must divide `timesteps`.
    pub ddim_steps: usize,
}

/// Denoiser architecture settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Channel widths per resolution level, finest first.
    pub widths: Vec<usize>,
    /// Level indices that get temporal attention (0 = finest).
    pub temporal_levels: Vec<usize>,
    pub groups: usize,
    /// Width of the timestep embedding vector.
    pub time_dim: usize,
    pub seed: u64,
}

/// First-frame-filling settings: flow-guided propagation plus learned
/// alignment of the noise fill.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FffConfig {
    pub enable_propagation: bool,
    pub enable_alignment: bool,
    /// Hidden width of the alignment-offset predictor.
    pub dna_width: usize,
    /// Hard cap on predicted alignment offsets, in latent cells.
    pub dna_clamp: f64,
    /// Minimum warped validity for a propagated cell to be accepted.
    pub validity_threshold: f64,
}

/// Parameter-freeze policy for a training phase.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Everything trainable.
    None,
    /// Only temporal attention blocks, the conditioning merge convolution and
    /// the alignment module stay trainable.
    TemporalOnly,
}

/// Optimization settings for the two diffusion training phases.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub finetune_freeze: FreezePolicy,
    /// Steps between loss log lines.
    pub log_every: usize,
    pub seed: u64,
}

/// Inference defaults; the CLI can override individual fields.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    /// Recover the starting state by running the sampler backwards over the
    /// reference latents instead of drawing fresh noise.
    pub use_inversion: bool,
    pub seed: u64,
}

/// Complete run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub vae: VaeConfig,
    pub diffusion: DiffusionConfig,
    pub unet: UNetConfig,
    pub fff: FffConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig {
                frames: 8,
                height: 64,
                width: 64,
                shapes_min: 1,
                shapes_max: 3,
                max_speed: 3,
                bg_max_speed: 2,
                mask: MaskConfig {
                    stationary_fraction: 0.5,
                    coverage_min: 0.12,
                    coverage_max: 0.35,
                    object_dilation: 2,
                },
            },
            vae: VaeConfig {
                latent_channels: 4,
                widths: [32, 64],
                groups: 8,
                kl_weight: 1e-6,
                lr: 2e-3,
                steps: 600,
                batch_frames: 8,
                seed: 11,
            },
            diffusion: DiffusionConfig {
                timesteps: 1000,
                beta_start: 1e-4,
                beta_end: 0.02,
                ddim_steps: 50,
            },
            unet: UNetConfig {
                widths: vec![32, 64, 128],
                temporal_levels: vec![1, 2],
                groups: 8,
                time_dim: 64,
                seed: 12,
            },
            fff: FffConfig {
                enable_propagation: true,
                enable_alignment: true,
                dna_width: 32,
                dna_clamp: 4.0,
                validity_threshold: 0.5,
            },
            train: TrainConfig {
                pretrain_steps: 800,
                finetune_steps: 400,
                lr_pretrain: 1e-3,
                lr_finetune: 5e-4,
                finetune_freeze: FreezePolicy::TemporalOnly,
                log_every: 50,
                seed: 13,
            },
            infer: InferConfig {
                use_inversion: true,
                seed: 14,
            },
        }
    }
}

impl RunConfig {
    /// Loads and validates a configuration file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CoreError::Config(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks cross-field invariants that serde cannot express.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.frames < 2 {
            return Err(CoreError::Config("data.frames must be at least 2".into()));
        }
        if d.height % DOWNSAMPLE != 0 || d.width % DOWNSAMPLE != 0 {
            return Err(CoreError::Config(format!(
                "frame size {}x{} must be divisible by the latent downsample factor {DOWNSAMPLE}",
                d.height, d.width
            )));
        }
        if d.shapes_min == 0 || d.shapes_min > d.shapes_max {
            return Err(CoreError::Config("data.shapes_min must be in 1..=shapes_max".into()));
        }
        if d.max_speed < 1 || d.bg_max_speed < 0 {
            return Err(CoreError::Config("speed caps must be positive".into()));
        }
        let m = &d.mask;
        if !(0.0..=1.0).contains(&m.stationary_fraction) {
            return Err(CoreError::Config("mask.stationary_fraction must be in [0, 1]".into()));
        }
        if !(0.0 < m.coverage_min && m.coverage_min < m.coverage_max && m.coverage_max < 1.0) {
            return Err(CoreError::Config("mask coverage bounds must satisfy 0 < min < max < 1".into()));
        }
        if self.vae.latent_channels == 0 || self.vae.latent_channels % 2 != 0 {
            return Err(CoreError::Config("vae.latent_channels must be a positive even number".into()));
        }
        if self.vae.widths.iter().any(|w| w % self.vae.groups != 0) {
            return Err(CoreError::Config("vae.widths must be divisible by vae.groups".into()));
        }
        let diff = &self.diffusion;
        if diff.timesteps == 0 || diff.ddim_steps == 0 || diff.timesteps % diff.ddim_steps != 0 {
            return Err(CoreError::Config(
                "diffusion.ddim_steps must be a positive divisor of diffusion.timesteps".into(),
            ));
        }
        if !(0.0 < diff.beta_start && diff.beta_start < diff.beta_end && diff.beta_end < 1.0) {
            return Err(CoreError::Config("diffusion betas must satisfy 0 < start < end < 1".into()));
        }
        let u = &self.unet;
        if u.widths.is_empty() {
            return Err(CoreError::Config("unet.widths must be non-empty".into()));
        }
        if u.widths.iter().any(|w| w % u.groups != 0) {
            return Err(CoreError::Config("unet.widths must be divisible by unet.groups".into()));
        }
        if u.temporal_levels.iter().any(|&l| l >= u.widths.len()) {
            return Err(CoreError::Config("unet.temporal_levels index out of range".into()));
        }
        if u.time_dim % 2 != 0 {
            return Err(CoreError::Config("unet.time_dim must be even".into()));
        }
        let latent = self.data.height / DOWNSAMPLE;
        let coarsest = latent >> (u.widths.len() - 1);
        if coarsest == 0 {
            return Err(CoreError::Config(format!(
                "unet.widths has {} levels but the latent grid is only {latent} cells tall",
                u.widths.len()
            )));
        }
        if self.fff.dna_clamp <= 0.0 || self.fff.dna_width % 2 != 0 {
            return Err(CoreError::Config("fff.dna_clamp must be positive and fff.dna_width even".into()));
        }
        if !(0.0..=1.0).contains(&self.fff.validity_threshold) {
            return Err(CoreError::Config("fff.validity_threshold must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Spatial downsample factor between pixels and latent cells. Fixed by the
/// autoencoder architecture (two stride-2 stages).
pub const DOWNSAMPLE: usize = 4;

/// SHA-256 hex digest of a value's canonical (compact) JSON encoding.
/// Struct field order is fixed by the type, so the digest is stable.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_string(value).expect("value serializes");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        use std::fmt::Write;
        let _ = write!(hex, "{byte:02x}");
    }
    hex
}

/// SHA-256 hex digest of the canonical (compact) JSON encoding.
pub fn config_hash(cfg: &RunConfig) -> String {
    json_hash(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        RunConfig::default().validate().expect("default config must be valid");
    }

    #[test]
    fn json_roundtrip_preserves_config_and_hash() {
        let cfg = RunConfig::default();
        let text = cfg.to_json_pretty();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(config_hash(&cfg), config_hash(&back));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::default().to_json_pretty()).unwrap();
        v["data"]["typo_field"] = serde_json::json!(1);
        let err = serde_json::from_value::<RunConfig>(v);
        assert!(err.is_err(), "unknown field must be rejected");
    }

    #[test]
    fn hash_changes_with_any_field() {
        let cfg = RunConfig::default();
        let mut other = cfg.clone();
        other.diffusion.ddim_steps = 25;
        assert_ne!(config_hash(&cfg), config_hash(&other));
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.data.frames = 1;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.diffusion.ddim_steps = 33;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.data.height = 62;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.unet.temporal_levels = vec![7];
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.data.mask.coverage_min = 0.5;
        cfg.data.mask.coverage_max = 0.3;
        assert!(cfg.validate().is_err());
    }
}
