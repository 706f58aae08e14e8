//! Run configuration: one JSON document holding every knob of a run, with
//! dotted-path overrides and a desk-scale preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::features::{FeatureKind, FrameConfig};
use crate::icl::{TrainConfig, TrainMode};
use crate::model::EncoderConfig;
use crate::signal::{ClassSpec, SplitRatios, SynthesisSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config field `{field}`: {reason}")]
    Field { field: String, reason: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

fn field(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub segmentation: SegmentationConfig,
    pub split: SplitRatios,
    pub features: FeatureSettings,
    pub encoder: EncoderSettings,
    pub training: TrainConfig,
    /// Worker cap for feature extraction and multi-run experiments.
    pub jobs: Option<usize>,
}

/// Exactly one of `manifest` and `synthesis`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub manifest: Option<PathBuf>,
    pub synthesis: Option<SynthesisSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationConfig {
    /// Seconds.
    pub length: f64,
    /// Seconds shared by consecutive segments.
    pub overlap: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            length: 30.0,
            overlap: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSettings {
    /// Framing used by every feature without its own `frame`.
    pub frame: FrameConfig,
    pub stft: StftSettings,
    pub mel: MelSettings,
    pub cqt: CqtSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct StftSettings {
    pub frame: Option<FrameConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelSettings {
    pub n_filters: usize,
    pub frame: Option<FrameConfig>,
}

impl Default for MelSettings {
    fn default() -> Self {
        Self {
            n_filters: 300,
            frame: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CqtSettings {
    /// Hz; 50 when omitted.
    pub f_min: Option<f64>,
    /// Hz; 0.95 of Nyquist when omitted.
    pub f_max: Option<f64>,
    pub bins_per_octave: u32,
    pub frame: Option<FrameConfig>,
}

impl Default for CqtSettings {
    fn default() -> Self {
        Self {
            f_min: None,
            f_max: None,
            bins_per_octave: 36,
            frame: None,
        }
    }
}

pub const DEFAULT_CQT_FMIN: f64 = 50.0;
pub const DEFAULT_CQT_FMAX_FRACTION: f64 = 0.95;

impl FeatureSettings {
    pub fn frame_for(&self, kind: FeatureKind) -> FrameConfig {
        let own = match kind {
            FeatureKind::Stft => self.stft.frame,
            FeatureKind::Mel => self.mel.frame,
            FeatureKind::Cqt => self.cqt.frame,
        };
        own.unwrap_or(self.frame)
    }

    /// Fill every omitted value from the sample rate.
    pub fn resolve(&mut self, sample_rate: u32) {
        self.stft.frame.get_or_insert(self.frame);
        self.mel.frame.get_or_insert(self.frame);
        self.cqt.frame.get_or_insert(self.frame);
        self.cqt.f_min.get_or_insert(DEFAULT_CQT_FMIN);
        self.cqt
            .f_max
            .get_or_insert(DEFAULT_CQT_FMAX_FRACTION * sample_rate as f64 / 2.0);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSettings {
    pub stem_channels: usize,
    pub blocks_per_stage: usize,
    pub widths: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        Self::from_encoder(&EncoderConfig::standard(FeatureKind::Mel))
    }
}

impl EncoderSettings {
    fn from_encoder(e: &EncoderConfig) -> Self {
        Self {
            stem_channels: e.stem_channels,
            blocks_per_stage: e.blocks_per_stage,
            widths: e.widths.clone(),
            embedding_dim: e.embedding_dim,
        }
    }

    pub fn for_kind(&self, kind: FeatureKind) -> EncoderConfig {
        EncoderConfig {
            kind,
            stem_channels: self.stem_channels,
            blocks_per_stage: self.blocks_per_stage,
            widths: self.widths.clone(),
            embedding_dim: self.embedding_dim,
            input_shape: None,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig {
                manifest: None,
                synthesis: Some(ship_noise_spec(22050, 8, 60.0, 0)),
            },
            segmentation: SegmentationConfig::default(),
            split: SplitRatios::default(),
            features: FeatureSettings::default(),
            encoder: EncoderSettings::default(),
            training: TrainConfig::default(),
            jobs: None,
        }
    }
}

/// Four classes from two independent cues: a pair of low tonal lines
/// (120/240 Hz or 170/340 Hz) and the envelope rate of a 1-1.8 kHz noise
/// carrier (60 or 80 Hz).
pub fn ship_noise_spec(sample_rate: u32, tracks_per_class: usize, track_duration: f64, seed: u64) -> SynthesisSpec {
    let class = |name: &str, base: f64, rate: f64| ClassSpec {
        name: name.into(),
        line_freqs: vec![base, 2.0 * base],
        mod_rate: rate,
        mod_depth: 0.8,
    };
    SynthesisSpec {
        classes: vec![
            class("low-slow", 120.0, 60.0),
            class("low-fast", 120.0, 80.0),
            class("high-slow", 170.0, 60.0),
            class("high-fast", 170.0, 80.0),
        ],
        carrier_band: (1000.0, 1800.0),
        snr_db: Some(10.0),
        tracks_per_class,
        track_duration,
        sample_rate,
        seed,
        line_amplitude: 0.3,
        carrier_amplitude: 1.0,
        freq_jitter: 0.01,
    }
}

/// Named bundles of overrides.
pub const PRESETS: [&str; 1] = ["desk"];

impl RunConfig {
    /// Laptop-scale run: 4 kHz synthetic audio, 3 s segments, small encoders,
    /// 20 epochs.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.dataset.synthesis = Some(ship_noise_spec(4000, 8, 12.0, 0));
        cfg.segmentation = SegmentationConfig {
            length: 3.0,
            overlap: 1.5,
        };
        cfg.split = SplitRatios {
            train: 0.75,
            val: 0.125,
            test: 0.125,
        };
        cfg.features.mel.n_filters = 40;
        cfg.features.cqt = CqtSettings {
            f_min: Some(800.0),
            f_max: Some(1900.0),
            bins_per_octave: 36,
            // short frames keep the 60/80 Hz envelopes visible; the 18 ms hop
            // aliases them to distinct slow and fast frame-to-frame patterns
            frame: Some(FrameConfig {
                frame_len_ms: 20.0,
                frame_shift_ms: 18.0,
            }),
        };
        cfg.encoder = EncoderSettings::from_encoder(&EncoderConfig::desk(FeatureKind::Mel));
        cfg.training.epochs = 20;
        cfg.training.batch_size = 16;
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            other => Err(field("preset", format!("unknown preset `{other}` (known: {})", PRESETS.join(", ")))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Set one leaf by dotted path, e.g. `training.alpha=0.2`. The value is
    /// parsed as JSON and falls back to a plain string.
    pub fn set(&mut self, path: &str, raw: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
        let mut node = &mut root;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let here = parts[..=i].join(".");
            node = match node {
                Value::Object(map) => {
                    if !map.contains_key(*part) {
                        return Err(field(&here, "no such field"));
                    }
                    map.get_mut(*part).expect("checked")
                }
                Value::Array(items) => {
                    let idx: usize = part.parse().map_err(|_| field(&here, "expected an array index"))?;
                    let len = items.len();
                    items
                        .get_mut(idx)
                        .ok_or_else(|| field(&here, format!("index out of range (length {len})")))?
                }
                Value::Null => {
                    return Err(field(&here, "parent is null; set the parent object first"));
                }
                _ => return Err(field(&here, "parent is not an object")),
            };
        }
        *node = value;
        *self = serde_json::from_value(root).map_err(|e| field(path, e.to_string()))?;
        Ok(())
    }

    /// Apply `path=value` overrides in order.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| field(o, "override must look like path=value"))?;
            self.set(path.trim(), raw.trim())?;
        }
        Ok(())
    }

    /// Field-level checks; `base` resolves a relative manifest path.
    pub fn validate(&self, base: &Path) -> Result<()> {
        match (&self.dataset.manifest, &self.dataset.synthesis) {
            (Some(m), None) => {
                let p = if m.is_absolute() { m.clone() } else { base.join(m) };
                if !p.exists() {
                    return Err(field("dataset.manifest", format!("{} does not exist", p.display())));
                }
            }
            (None, Some(s)) => s.validate().map_err(|e| field("dataset.synthesis", e.to_string()))?,
            _ => return Err(field("dataset", "set exactly one of manifest and synthesis")),
        }
        let seg = self.segmentation;
        if !(seg.length > 0.0 && seg.overlap >= 0.0 && seg.overlap < seg.length) {
            return Err(field("segmentation", "need 0 <= overlap < length"));
        }
        self.split.validate().map_err(|e| field("split", e.to_string()))?;
        for kind in FeatureKind::ALL {
            self.features
                .frame_for(kind)
                .validate()
                .map_err(|e| field(&format!("features.{}.frame", kind.name()), e.to_string()))?;
        }
        if self.features.mel.n_filters == 0 {
            return Err(field("features.mel.n_filters", "must be positive"));
        }
        if self.features.cqt.bins_per_octave == 0 {
            return Err(field("features.cqt.bins_per_octave", "must be positive"));
        }
        for kind in &self.training.features {
            self.encoder
                .for_kind(*kind)
                .validate()
                .map_err(|e| field("encoder", e.to_string()))?;
        }
        self.training
            .validate()
            .map_err(|e| field("training", e.to_string()))?;
        if self.training.mode == TrainMode::Icl && self.training.features.len() == 2 && self.training.batch_size < 2 {
            return Err(field("training.batch_size", "must be >= 2 in icl mode"));
        }
        if self.jobs == Some(0) {
            return Err(field("jobs", "must be >= 1"));
        }
        Ok(())
    }

    /// Sample rate when known from the config alone.
    pub fn synthesis_rate(&self) -> Option<u32> {
        self.dataset.synthesis.as_ref().map(|s| s.sample_rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.training.lr, 5e-4);
        assert_eq!(c.training.weight_decay, 1e-5);
        assert_eq!(c.training.alpha, 0.5);
        assert_eq!(c.features.mel.n_filters, 300);
        assert_eq!(c.features.cqt.bins_per_octave, 36);
        assert_eq!(c.features.frame.frame_len_ms, 50.0);
        assert_eq!(c.features.frame.frame_shift_ms, 25.0);
        assert_eq!((c.segmentation.length, c.segmentation.overlap), (30.0, 15.0));
        assert_eq!(c.training.epochs, 200);
        c.validate(Path::new(".")).unwrap();
        RunConfig::desk().validate(Path::new(".")).unwrap();
    }

    #[test]
    fn json_round_trip_and_partial_documents() {
        let c = RunConfig::desk();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        let partial = RunConfig::from_json(r#"{"seed": 9, "training": {"mode": "single", "features": ["mel"], "lr": 1e-3, "weight_decay": 0, "epochs": 2, "batch_size": 4, "alpha": 0, "symmetric": false}}"#).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.features.mel.n_filters, 300);
        assert!(RunConfig::from_json(r#"{"sed": 1}"#).is_err());
    }

    #[test]
    fn dotted_overrides() {
        let mut c = RunConfig::desk();
        c.apply_overrides(["training.alpha=0.2", "encoder.widths.0=8", "features.mel.frame={\"frame_len_ms\":40,\"frame_shift_ms\":20}"])
            .unwrap();
        assert_eq!(c.training.alpha, 0.2);
        assert_eq!(c.encoder.widths[0], 8);
        assert_eq!(c.features.frame_for(FeatureKind::Mel).frame_len_ms, 40.0);
        c.set("training.mode", "single").unwrap();
        assert_eq!(c.training.mode, TrainMode::Single);
        let err = c.set("training.alfa", "1").unwrap_err().to_string();
        assert!(err.contains("training.alfa"), "{err}");
        assert!(c.set("training.alpha", "\"x\"").is_err());
        assert!(c.apply_overrides(["seed"]).is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = RunConfig::desk();
        c.training.alpha = -1.0;
        assert!(c.validate(Path::new(".")).unwrap_err().to_string().contains("training"));
        let mut c = RunConfig::desk();
        c.dataset.manifest = Some("missing.json".into());
        assert!(c.validate(Path::new(".")).is_err());
        c.dataset.synthesis = None;
        assert!(c.validate(Path::new(".")).unwrap_err().to_string().contains("dataset.manifest"));
        let mut c = RunConfig::desk();
        c.training.batch_size = 1;
        assert!(c.validate(Path::new(".")).is_err());
    }

    #[test]
    fn resolve_fills_frames_and_cqt_range() {
        let mut f = FeatureSettings::default();
        f.resolve(22050);
        assert_eq!(f.cqt.f_min, Some(50.0));
        assert!((f.cqt.f_max.unwrap() - 0.95 * 11025.0).abs() < 1e-9);
        assert_eq!(f.mel.frame, Some(f.frame));
    }
}
