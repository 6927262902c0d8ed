//! Model, training and decoding configuration with the `paper` and `desk`
//! presets.
//!
//! A configuration file is a JSON object. The optional `"preset"` key picks
//! the base preset (default `desk`); every other key overrides a field of
//! that preset, recursing into nested objects. Unknown keys are rejected.
//! Command-line flags are applied after the file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Desk,
}

/// Sequence-length caps applied at ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Caps {
    pub question: usize,
    pub caption: usize,
    pub answer: usize,
    pub history_utterance: usize,
}

impl Default for Caps {
    fn default() -> Self {
        Self {
            question: 24,
            caption: 32,
            answer: 20,
            history_utterance: 24,
        }
    }
}

/// Graph-surgery switches for the ablation variants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Raw history word embeddings and `E_q^vis` replace `Ê_h` and `Ê_q`.
    pub no_text_encoder: bool,
    /// One attention network serves all four pairings.
    pub single_attention: bool,
    /// Block-sum coefficients fixed at 1.
    pub no_weight_matrix: bool,
    /// Projected video and `E_q^txt` go straight to the generator.
    pub no_visual_encoder: bool,
    /// Fully connected fusion replaces the gate.
    pub no_gate: bool,
    /// Alias for `no_gate`.
    pub fc_fuse: bool,
}

impl Ablation {
    pub fn uses_fc_fusion(&self) -> bool {
        self.no_gate || self.fc_fuse
    }

    pub fn validate(&self) -> Result<()> {
        if self.no_text_encoder && self.no_visual_encoder {
            return Err(Error::Config(
                "no_text_encoder and no_visual_encoder cannot both be set".into(),
            ));
        }
        Ok(())
    }

    /// Named variants accepted by `ablate --variants`.
    pub fn variant(name: &str) -> Result<Self> {
        let mut a = Self::default();
        match name {
            "full" => {}
            "no_text_encoder" => a.no_text_encoder = true,
            "single_attention" => a.single_attention = true,
            "no_weight_matrix" => a.no_weight_matrix = true,
            "no_visual_encoder" => a.no_visual_encoder = true,
            "no_gate" => a.no_gate = true,
            other => return Err(Error::Config(format!("unknown ablation variant `{other}`"))),
        }
        Ok(a)
    }
}

/// How the path-search comparison map `f_t` is initialised. It receives no
/// gradient (its output only steers discrete matches), so the initial
/// weights decide its behaviour for good.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchInit {
    /// `h' = (e + h) / 2`.
    Averaging,
    /// Same uniform fan-in initialisation as every other layer.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam,
    Nucleus,
    Contrastive,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "beam" => Ok(Strategy::Beam),
            "nucleus" => Ok(Strategy::Nucleus),
            "contrastive" => Ok(Strategy::Contrastive),
            other => Err(Error::Config(format!("unknown decoding strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_width: usize,
    /// Maximum number of generated tokens before EOS is forced.
    pub max_len: usize,
    pub length_penalty: f64,
    pub top_p: f64,
    pub alpha: f64,
    pub candidate_k: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Beam,
            beam_width: 5,
            max_len: 20,
            length_penalty: 0.2,
            top_p: 0.9,
            alpha: 0.6,
            candidate_k: 5,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width < 1 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config("top_p must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must lie in [0, 1]".into()));
        }
        if self.candidate_k < 1 || self.max_len < 1 {
            return Err(Error::Config("candidate_k and max_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Base learning rate; dropped tenfold between epochs 5 and 10.
    pub lr: f64,
    pub adam: AdamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature dimension `d`.
    pub d: usize,
    /// Attention heads `J`.
    pub heads: usize,
    /// Reasoning iterations `I`.
    pub iterations: usize,
    /// Path-search selection threshold `p`.
    pub threshold: f64,
    /// Frames `F` and objects per frame `O` of a video feature block.
    pub frames: usize,
    pub objects: usize,
    /// Raw object-feature width.
    pub raw_dim: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub layer_norm_eps: f64,
    pub tie_output: bool,
    pub caps: Caps,
    /// Keep only the most recent `k` history utterances.
    pub turns_window: Option<usize>,
    pub ablation: Ablation,
    pub normalize_block_sums: bool,
    pub visual_uses_text_enhanced: bool,
    pub search_init: SearchInit,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub seed: u64,
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self {
                d: 768,
                heads: 3,
                iterations: 3,
                threshold: 0.6,
                frames: 15,
                objects: 6,
                raw_dim: 2048,
                decoder_layers: 12,
                ffn_dim: 3072,
                max_positions: 1024,
                layer_norm_eps: 1e-5,
                tie_output: false,
                caps: Caps::default(),
                turns_window: None,
                ablation: Ablation::default(),
                normalize_block_sums: false,
                visual_uses_text_enhanced: false,
                search_init: SearchInit::Averaging,
                train: TrainConfig {
                    epochs: 20,
                    batch_size: 32,
                    lr: 3.5e-4,
                    adam: AdamConfig::default(),
                },
                decode: DecodeConfig::default(),
                seed: 0,
            },
            Preset::Desk => Self {
                d: 48,
                heads: 3,
                iterations: 3,
                threshold: 0.6,
                frames: 5,
                objects: 3,
                raw_dim: 16,
                decoder_layers: 2,
                ffn_dim: 96,
                max_positions: 256,
                layer_norm_eps: 1e-5,
                tie_output: false,
                caps: Caps::default(),
                turns_window: None,
                ablation: Ablation::default(),
                normalize_block_sums: true,
                visual_uses_text_enhanced: false,
                search_init: SearchInit::Averaging,
                train: TrainConfig {
                    epochs: 20,
                    batch_size: 4,
                    lr: 3e-3,
                    adam: AdamConfig::default(),
                },
                decode: DecodeConfig::default(),
                seed: 7,
            },
        }
    }

    pub fn desk() -> Self {
        Self::preset(Preset::Desk)
    }

    pub fn paper() -> Self {
        Self::preset(Preset::Paper)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d ({}) must be a positive multiple of heads ({})",
                self.d, self.heads
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("threshold must lie in [0, 1]".into()));
        }
        if self.frames == 0 || self.objects == 0 || self.raw_dim == 0 {
            return Err(Error::Config("video extents must be positive".into()));
        }
        if self.decoder_layers == 0 || self.ffn_dim == 0 || self.max_positions == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.turns_window == Some(0) {
            return Err(Error::Config("turns_window must be at least 1".into()));
        }
        self.ablation.validate()?;
        self.decode.validate()
    }

    /// Parses a configuration document (see the module docs).
    pub fn from_json(text: &str) -> Result<Self> {
        let mut doc: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let preset = match obj.remove("preset") {
            None => Preset::Desk,
            Some(v) => serde_json::from_value(v)
                .map_err(|e| Error::Config(format!("preset: {e}")))?,
        };
        let mut base = serde_json::to_value(Self::preset(preset)).expect("config serialises");
        merge(&mut base, doc);
        let cfg: Self =
            serde_json::from_value(base).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
