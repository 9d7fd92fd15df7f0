//! The pipeline configuration document.
//!
//! Every field has a default and unknown keys are rejected. [`PipelineConfig::to_json`]
//! is the canonical form: loading it and saving again reproduces the same bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::frontend::MfbConfig;
use crate::head::{HeadConfig, HeadInput};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AudioConfig {
    /// Expected input rate; files at other rates are rejected.
    pub sample_rate: u32,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self { sample_rate: 8000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct VadConfig {
    pub enabled: bool,
    /// Frames more than this many dB below the loudest frame are dropped.
    pub offset_db: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            offset_db: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    /// Adaptive s-norm; needs a cohort archive.
    pub snorm: bool,
    pub top_k: usize,
    /// Per source-pair normalization; needs source metadata.
    pub chnorm: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            snorm: false,
            top_k: 200,
            chnorm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { c_miss: 1.0, c_fa: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Root seed; every component derives its own stream from it.
    pub seed: u64,
    pub audio: AudioConfig,
    pub mfb: MfbConfig,
    pub vad: VadConfig,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub scoring: ScoringConfig,
    pub metrics: MetricsConfig,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn schema_json() -> String {
        let schema = schemars::schema_for!(PipelineConfig);
        let mut s = serde_json::to_string_pretty(&schema).expect("schema serializes");
        s.push('\n');
        s
    }

    /// Checks everything that does not depend on data (head dims are
    /// resolved from the features and manifest later).
    pub fn validate(&self) -> Result<()> {
        if self.audio.sample_rate == 0 {
            return Err(Error::Config("audio.sample_rate must be positive".into()));
        }
        self.mfb.validate(self.audio.sample_rate)?;
        if !(self.vad.offset_db > 0.0) {
            return Err(Error::Config("vad.offset_db must be positive".into()));
        }
        self.augment.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        if self.head.input == HeadInput::Encoder {
            if self.encoder.sample_rate != self.audio.sample_rate {
                return Err(Error::Config(format!(
                    "encoder.sample_rate {} differs from audio.sample_rate {}",
                    self.encoder.sample_rate, self.audio.sample_rate
                )));
            }
            if !self.train.freeze_encoder {
                return Err(Error::Config(
                    "encoder fine-tuning is not supported; set train.freeze_encoder = true".into(),
                ));
            }
        }
        if self.scoring.top_k == 0 {
            return Err(Error::Config("scoring.top_k must be >= 1".into()));
        }
        if !(self.metrics.c_miss > 0.0 && self.metrics.c_fa > 0.0) {
            return Err(Error::Config("metrics costs must be positive".into()));
        }
        Ok(())
    }

    /// Head configuration with the input dimension and class count filled in.
    pub fn resolved_head(&self, n_classes: usize) -> HeadConfig {
        let mut h = self.head.clone();
        if h.input_dim == 0 {
            h.input_dim = match h.input {
                HeadInput::Mfb => self.mfb.n_mels,
                HeadInput::Encoder => self.encoder.d_model,
            };
        }
        if h.n_classes == 0 {
            h.n_classes = n_classes;
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trip_is_byte_identical() {
        let text = PipelineConfig::default().to_json();
        let back = PipelineConfig::from_json(&text).unwrap();
        assert_eq!(back.to_json(), text);
        assert_eq!(back, PipelineConfig::default());
    }

    #[test]
    fn non_default_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 99;
        cfg.train.lr_max = 0.123456789;
        cfg.augment.noise_dir = Some("/data/noise".into());
        cfg.encoder.truncate_layer = 6;
        let text = cfg.to_json();
        assert_eq!(PipelineConfig::from_json(&text).unwrap().to_json(), text);
    }

    #[test]
    fn partial_documents_take_defaults() {
        let cfg = PipelineConfig::from_json(r#"{"seed": 7, "vad": {"offset_db": 30}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.vad.offset_db, 30.0);
        assert!(cfg.vad.enabled);
        assert_eq!(cfg.mfb, MfbConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::from_json(r#"{"sed": 1}"#).is_err());
        let e = PipelineConfig::from_json(r#"{"head": {"margn": 0.2}}"#).unwrap_err();
        assert!(e.to_string().contains("margn"), "{e}");
    }

    #[test]
    fn cross_section_validation() {
        let mut cfg = PipelineConfig::default();
        cfg.head.input = HeadInput::Encoder;
        assert!(cfg.validate().is_err());
        cfg.encoder.sample_rate = 8000;
        cfg.validate().unwrap();
        cfg.train.freeze_encoder = false;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn schema_lists_every_section() {
        let schema: serde_json::Value = serde_json::from_str(&PipelineConfig::schema_json()).unwrap();
        let props = schema["properties"].as_object().unwrap();
        for key in ["seed", "audio", "mfb", "vad", "augment", "encoder", "head", "train", "scoring", "metrics"] {
            assert!(props.contains_key(key), "{key}");
        }
        assert_eq!(schema["additionalProperties"], serde_json::Value::Bool(false));
    }

    #[test]
    fn resolved_head_dims() {
        let cfg = PipelineConfig::default();
        let h = cfg.resolved_head(20);
        assert_eq!((h.input_dim, h.n_classes), (64, 20));
        let mut enc = cfg.clone();
        enc.head.input = HeadInput::Encoder;
        assert_eq!(enc.resolved_head(3).input_dim, 64);
    }
}
