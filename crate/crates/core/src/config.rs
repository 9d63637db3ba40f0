//! Run configuration: every field has a default and the whole struct
//! round-trips through TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::{ContrastiveLossConfig, Stage2ScheduleConfig};
use crate::dataio::{SplitTag, SynthConfig};
use crate::encoders::{AudioEncoderConfig, EncoderConfig, VisualEncoderConfig};
use crate::error::{Error, Result};
use crate::metrics::AsdKind;
use crate::optim::AdamWConfig;
use crate::phonology::NUM_ARTICULATORS;
use crate::segmodel::{CrossAttnDecoderConfig, DecodeHeadConfig, FusionKind, SegModelConfig};

/// Model dimensions; frame geometry and audio length come from the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub patch: usize,
    pub hidden: usize,
    pub visual_depth: usize,
    pub visual_heads: usize,
    pub mlp_ratio: usize,
    /// 1-based visual layers fused for patch features.
    pub taps: Vec<usize>,
    pub audio_conv_channels: usize,
    pub audio_conv_layers: Vec<(usize, usize)>,
    pub audio_depth: usize,
    pub audio_heads: usize,
    pub proj_dim: usize,
    pub decoder: CrossAttnDecoderConfig,
    pub head: DecodeHeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            hidden: 32,
            visual_depth: 6,
            visual_heads: 4,
            mlp_ratio: 2,
            taps: vec![2, 4, 6],
            audio_conv_channels: 32,
            audio_conv_layers: vec![(8, 4), (4, 4), (4, 4)],
            audio_depth: 2,
            audio_heads: 4,
            proj_dim: 32,
            decoder: CrossAttnDecoderConfig::default(),
            head: DecodeHeadConfig { mid1: 16, mid2: 8 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub schedule: Stage2ScheduleConfig,
    pub loss: ContrastiveLossConfig,
    pub batch_size: usize,
    /// Full-encoder training epochs before the freeze schedule, needed
    /// because the encoders start from random initialization.
    pub bootstrap_epochs: usize,
    pub bootstrap_lr: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            schedule: Stage2ScheduleConfig::default(),
            loss: ContrastiveLossConfig::default(),
            batch_size: 16,
            bootstrap_epochs: 16,
            bootstrap_lr: 3e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage3Config {
    /// 1e-3 at desk scale, where every decoder starts from random weights and
    /// the epoch cap is 40; `paper_scale` restores 1e-4.
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 1e-2, max_epochs: 100, patience: 15, batch_size: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub split: SplitTag,
    pub asd: AsdKind,
    /// Frames per timed latency batch.
    pub latency_frames: usize,
    pub latency_reps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { split: SplitTag::UsUt, asd: AsdKind::Symmetric, latency_frames: 50, latency_reps: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Multiplier on stage-2 epochs and the stage-3 epoch cap (0.4 at desk
    /// scale: 50 → 20 and 100 → 40; 1.0 restores the full schedule).
    pub scale: f64,
    pub corpus: SynthConfig,
    pub model: ModelConfig,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    pub optimizer: AdamWConfig,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scale: 0.4,
            corpus: SynthConfig::default(),
            model: ModelConfig::default(),
            stage2: Stage2Config::default(),
            stage3: Stage3Config::default(),
            optimizer: AdamWConfig::default(),
            eval: EvalConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn scaled(base: usize, scale: f64) -> usize {
    ((base as f64 * scale).round() as usize).max(1)
}

impl RunConfig {
    /// Full schedule lengths (50 stage-2 epochs, 100-epoch stage-3 cap).
    pub fn paper_scale() -> Self {
        let mut c = Self { scale: 1.0, ..Self::default() };
        c.stage3.lr = 1e-4;
        c
    }

    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse { path: path.to_path_buf(), detail: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.corpus.seed = seed;
        c
    }

    pub fn stage2_epochs(&self) -> usize {
        scaled(self.stage2.schedule.epochs, self.scale)
    }

    pub fn stage3_max_epochs(&self) -> usize {
        scaled(self.stage3.max_epochs, self.scale)
    }

    /// Stage-2 schedule with the scaled epoch count.
    pub fn stage2_schedule(&self) -> Stage2ScheduleConfig {
        Stage2ScheduleConfig { epochs: self.stage2_epochs(), ..self.stage2.schedule.clone() }
    }

    pub fn encoder_config(&self, in_channels: usize) -> EncoderConfig {
        let m = &self.model;
        EncoderConfig {
            visual: VisualEncoderConfig {
                in_channels,
                height: self.corpus.height,
                width: self.corpus.width,
                patch: m.patch,
                hidden: m.hidden,
                depth: m.visual_depth,
                heads: m.visual_heads,
                mlp_ratio: m.mlp_ratio,
                taps: m.taps.clone(),
            },
            audio: AudioEncoderConfig {
                input_len: 3 * self.corpus.window(),
                conv_channels: m.audio_conv_channels,
                conv_layers: m.audio_conv_layers.clone(),
                hidden: m.hidden,
                depth: m.audio_depth,
                heads: m.audio_heads,
                mlp_ratio: m.mlp_ratio,
            },
            proj_dim: m.proj_dim,
        }
    }

    pub fn seg_config(&self, with_prior: bool, fusion: FusionKind) -> SegModelConfig {
        let c = if with_prior { 1 + NUM_ARTICULATORS } else { 1 };
        SegModelConfig {
            encoder: self.encoder_config(c),
            decoder: self.model.decoder.clone(),
            head: self.model.head.clone(),
            fusion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.seg_config(true, FusionKind::CrossAttention).validate()?;
        self.stage2.loss.validate()?;
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        if self.stage2.batch_size < 2 {
            return Err(Error::Config("contrastive batches need at least 2 pairs".into()));
        }
        if self.stage3.batch_size == 0 || self.eval.latency_frames == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        for lr in [self.stage3.lr, self.stage2.bootstrap_lr] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("learning rate {lr} must be positive")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml(), Path::new("x.toml")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn scale_knob() {
        let c = RunConfig::default();
        assert_eq!((c.stage2_epochs(), c.stage3_max_epochs()), (20, 40));
        let p = RunConfig::paper_scale();
        assert_eq!((p.stage2_epochs(), p.stage3_max_epochs()), (50, 100));
        assert_eq!(p.stage2_schedule().top_layer_epoch(), 21);
        assert_eq!((p.stage3.lr, p.stage3.weight_decay), (1e-4, 1e-2));
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = RunConfig::from_toml_str("seed = 7\n[stage3]\npatience = 3\n", Path::new("x.toml")).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.stage3.patience, 3);
        assert_eq!(c.stage3.lr, 1e-3);
    }

    #[test]
    fn invalid_is_config_error() {
        let r = RunConfig::from_toml_str("scale = -1.0\n", Path::new("x.toml"));
        assert!(matches!(r, Err(Error::Config(_))));
        let r = RunConfig::from_toml_str("seed = \"x\"\n", Path::new("x.toml"));
        assert!(matches!(r, Err(Error::Parse { .. })));
    }
}
