//! Architecture configuration and the experiment presets.

use serde::{Deserialize, Serialize};

use super::roi::RoiBounds;
use crate::attention::DEFAULT_SCORE_BUDGET;
use crate::error::{Error, Result};
use crate::fpn::FPN_CHANNELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Three-branch keypoint head; optional attention and pyramid fusion.
    Network1,
    /// ROI crop and a single confidence head.
    Network2,
}

/// The three experiment configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Experiment {
    /// Encoder + keypoint decoder.
    Exp1,
    /// Adds self-attention and pyramid fusion.
    Exp2,
    /// ROI crop, confidence-only head, focal + LineIoU.
    Exp3,
}

impl Experiment {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exp1" => Ok(Experiment::Exp1),
            "exp2" => Ok(Experiment::Exp2),
            "exp3" => Ok(Experiment::Exp3),
            other => Err(Error::InvalidArgument(format!(
                "unknown preset `{other}` (expected exp1, exp2 or exp3)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Exp1 => "exp1",
            Experiment::Exp2 => "exp2",
            Experiment::Exp3 => "exp3",
        }
    }

    pub fn variant(self) -> Variant {
        match self {
            Experiment::Exp1 | Experiment::Exp2 => Variant::Network1,
            Experiment::Exp3 => Variant::Network2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scale {
    /// 64×128 input, T=2, widths [16, 32, 64, 128].
    Desk,
    /// 256×512 input, T=4, widths [64, 128, 256, 512].
    Full,
}

impl Scale {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            other => Err(Error::InvalidArgument(format!("unknown scale `{other}` (expected desk or full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub temporal_depth: usize,
    /// `(height, width)` of the network input after resizing.
    pub input_resolution: (usize, usize),
    pub factorized: bool,
    pub variant: Variant,
    pub attention_enabled: bool,
    pub temporal_kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fpn_enabled: bool,
    pub fpn_channels: usize,
    /// Attention key width; `None` means half the stage-3 width.
    pub attention_dk: Option<usize>,
    pub attention_budget: usize,
    pub embed_dim: usize,
    pub dropout: f64,
    pub roi: RoiBounds,
}

/// Overall spatial stride of the deepest encoder stage.
pub const ENCODER_STRIDE: usize = 16;
/// Spatial stride of the decoder maps relative to the network input.
pub const DECODER_STRIDE: usize = 4;

impl ModelConfig {
    pub fn preset(experiment: Experiment, scale: Scale) -> Self {
        let (stage_channels, temporal_depth, input_resolution) = match scale {
            Scale::Desk => ([16, 32, 64, 128], 2, (64, 128)),
            Scale::Full => ([64, 128, 256, 512], 4, (256, 512)),
        };
        let variant = experiment.variant();
        Self {
            encoder: EncoderConfig {
                stage_channels,
                blocks_per_stage: 2,
                temporal_depth,
                input_resolution,
                factorized: true,
                variant,
                attention_enabled: experiment == Experiment::Exp2,
                temporal_kernel: 3,
            },
            fpn_enabled: experiment == Experiment::Exp2,
            fpn_channels: FPN_CHANNELS,
            attention_dk: None,
            attention_budget: DEFAULT_SCORE_BUDGET,
            embed_dim: 4,
            dropout: 0.3,
            roi: RoiBounds::default(),
        }
    }

    /// Widths `[4, 8, 16, 32]` at 32×64, T=2: small enough for exhaustive checks.
    pub fn micro(experiment: Experiment) -> Self {
        let mut cfg = Self::preset(experiment, Scale::Desk);
        cfg.encoder.stage_channels = [4, 8, 16, 32];
        cfg.encoder.input_resolution = (32, 64);
        cfg.fpn_channels = 8;
        cfg
    }

    pub fn variant(&self) -> Variant {
        self.encoder.variant
    }

    pub fn attention_width(&self) -> usize {
        self.attention_dk.unwrap_or((self.encoder.stage_channels[2] / 2).max(1))
    }

    /// Frames a temporal kernel touches from an edge position.
    pub fn temporal_reach(&self) -> usize {
        self.encoder.temporal_kernel / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if e.stage_channels.contains(&0) || e.stage_channels.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("stage widths {:?} must be positive and strictly increasing", e.stage_channels));
        }
        if e.blocks_per_stage == 0 {
            return bad("blocks_per_stage must be at least 1".into());
        }
        if e.temporal_depth == 0 {
            return bad("temporal depth must be at least 1".into());
        }
        if e.temporal_kernel == 0 || e.temporal_kernel % 2 == 0 {
            return bad(format!("temporal kernel {} must be odd", e.temporal_kernel));
        }
        if e.temporal_depth < self.temporal_reach() {
            return bad(format!(
                "temporal depth {} is shorter than the temporal kernel reach {} (kernel {})",
                e.temporal_depth,
                self.temporal_reach(),
                e.temporal_kernel
            ));
        }
        let (h, w) = e.input_resolution;
        if h == 0 || w == 0 || h % ENCODER_STRIDE != 0 || w % ENCODER_STRIDE != 0 {
            return bad(format!("input resolution {h}x{w} must be a positive multiple of {ENCODER_STRIDE}"));
        }
        if e.variant == Variant::Network2 && (e.attention_enabled || self.fpn_enabled) {
            return bad("attention and pyramid fusion belong to Network 1 only".into());
        }
        if self.fpn_enabled && self.fpn_channels == 0 {
            return bad("fpn_channels must be positive".into());
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.attention_dk == Some(0) {
            return bad("attention d_k must be at least 1".into());
        }
        self.roi.validate()
    }

    /// Flattened `key = value` view used to report differences between configs.
    pub fn flat(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Lines describing every differing key, or empty when equal.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let a = self.flat();
        let b = other.flat();
        let mut lines = Vec::new();
        for ((ka, va), (_, vb)) in a.iter().zip(&b) {
            if va != vb {
                lines.push(format!("{ka}: {va} != {vb}"));
            }
        }
        lines
    }
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}
