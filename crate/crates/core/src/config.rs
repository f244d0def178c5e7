//! Run configuration (JSON). Every field has a default; unknown keys are
//! rejected so typos fail loudly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SlvError};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub encoders: EncoderConfig,
    pub fusion: FusionConfig,
    pub seg: SegConfig,
    pub train: TrainConfig,
}

/// Geometry the model expects from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub audio_bins: usize,
    pub max_tokens: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            frames: 8,
            audio_bins: 32,
            max_tokens: 12,
        }
    }
}

/// Seed presets for the frozen modality encoders. Two presets give two
/// mutually different "backbones".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    A,
    B,
}

impl Backbone {
    pub fn seed(self) -> u64 {
        match self {
            Backbone::A => 0x000A_11CE,
            Backbone::B => 0x0000_0B0B,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    pub patch: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    pub heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::A,
            patch: 4,
            audio_dim: 16,
            visual_dim: 64,
            text_dim: 32,
            heads: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionStrategy {
    LearnableToken,
    Mean,
}

impl std::str::FromStr for FusionStrategy {
    type Err = SlvError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learnable-token" => Ok(Self::LearnableToken),
            "mean" => Ok(Self::Mean),
            other => Err(SlvError::Config(format!("unknown fusion strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::LearnableToken => "learnable-token",
            Self::Mean => "mean",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub n_seg: usize,
    pub strategy: FusionStrategy,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            dim: 64,
            heads: 4,
            n_seg: 1,
            strategy: FusionStrategy::LearnableToken,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    pub patch: usize,
    pub dim: usize,
    pub mem_dim: usize,
    pub heads: usize,
    pub capacity: usize,
    pub occlusion_threshold: f64,
    pub train_prompt_encoder: bool,
    pub train_mask_decoder: bool,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            dim: 64,
            mem_dim: 32,
            heads: 4,
            capacity: 6,
            occlusion_threshold: 0.0,
            train_prompt_encoder: true,
            train_mask_decoder: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub wd: f64,
    pub warmup: usize,
    pub total_steps: usize,
    pub batch: usize,
    pub accum: usize,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            wd: 0.0,
            warmup: 100,
            total_steps: 1000,
            batch: 8,
            accum: 2,
            lambda_bce: 1.0,
            lambda_dice: 1.0,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| SlvError::Config(format!("invalid run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SlvError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Patch grid `(h, w)` of the frozen frame encoder.
    pub fn seg_grid(&self) -> (usize, usize) {
        (self.data.height / self.seg.patch, self.data.width / self.seg.patch)
    }

    /// Patch grid `(h, w)` of the frozen visual feature encoder.
    pub fn visual_grid(&self) -> (usize, usize) {
        (
            self.data.height / self.encoders.patch,
            self.data.width / self.encoders.patch,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SlvError::Config(m));
        let d = &self.data;
        if d.frames < 1 || d.height == 0 || d.width == 0 || d.audio_bins == 0 || d.max_tokens == 0 {
            return bad("data dimensions must be positive".into());
        }
        for (name, patch) in [("encoders.patch", self.encoders.patch), ("seg.patch", self.seg.patch)] {
            if patch == 0 || d.height % patch != 0 || d.width % patch != 0 {
                return bad(format!("{name}={patch} does not tile {}x{}", d.height, d.width));
            }
        }
        if !self.seg.patch.is_power_of_two() {
            return bad(format!("seg.patch={} must be a power of two", self.seg.patch));
        }
        let (gh, gw) = self.seg_grid();
        if gh % 2 != 0 || gw % 2 != 0 {
            return bad(format!("frame-encoder grid {gh}x{gw} must have even sides"));
        }
        let f = &self.fusion;
        if f.layers < 1 || f.n_seg < 1 || f.heads == 0 || f.dim % f.heads != 0 {
            return bad(format!(
                "fusion needs layers >= 1, n_seg >= 1 and dim divisible by heads (dim={}, heads={})",
                f.dim, f.heads
            ));
        }
        let e = &self.encoders;
        for (name, dim) in [("visual_dim", e.visual_dim), ("text_dim", e.text_dim)] {
            if e.heads == 0 || dim % e.heads != 0 {
                return bad(format!("encoders.{name}={dim} not divisible by {} heads", e.heads));
            }
        }
        if e.audio_dim < 2 {
            return bad("encoders.audio_dim must be at least 2".into());
        }
        let s = &self.seg;
        if s.heads == 0 || s.dim % s.heads != 0 || s.mem_dim == 0 {
            return bad(format!("seg.dim={} not divisible by {} heads", s.dim, s.heads));
        }
        let t = &self.train;
        if t.batch == 0 || t.accum == 0 {
            return bad("train.batch and train.accum must be positive".into());
        }
        if !(t.warmup > 0 && t.warmup < t.total_steps) {
            return bad(format!(
                "train.warmup must satisfy 0 < warmup < total_steps (warmup={}, total_steps={})",
                t.warmup, t.total_steps
            ));
        }
        if t.lambda_bce < 0.0 || t.lambda_dice < 0.0 || !(t.lr >= 0.0) || !(t.wd >= 0.0) {
            return bad("loss weights, lr and wd must be non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_recipe() {
        let c = RunConfig::default();
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.train.wd, 0.0);
        assert_eq!(c.train.warmup, 100);
        assert_eq!((c.train.batch, c.train.accum), (8, 2));
        assert_eq!((c.train.lambda_bce, c.train.lambda_dice), (1.0, 1.0));
        assert_eq!(c.fusion.layers, 6);
        assert_eq!(c.fusion.n_seg, 1);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"fusion": {"layerz": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra": {}}"#).is_err());
        let c = RunConfig::from_json(r#"{"fusion": {"layers": 3, "strategy": "mean"}}"#).unwrap();
        assert_eq!(c.fusion.layers, 3);
        assert_eq!(c.fusion.strategy, FusionStrategy::Mean);
        assert_eq!(c.fusion.dim, 64);
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"fusion": {"dim": 30, "heads": 4}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"warmup": 0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"warmup": 10, "total_steps": 10}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"seg": {"patch": 3}}"#).is_err());
    }
}
