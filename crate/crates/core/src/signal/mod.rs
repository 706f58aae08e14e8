//! Audio ingestion, synthetic ship-noise generation, segmentation and
//! track-disjoint splitting.

mod manifest;
mod segment;
mod split;
mod synth;
mod wav;

pub use manifest::{Manifest, ManifestEntry, TrackSource};
pub use segment::{segment_tracks, Segmentation};
pub use split::{split_track_disjoint, SplitAssignment, SplitRatios};
pub use synth::{synthesize_dataset, synthesize_track, ClassSpec, SynthesisSpec};
pub use wav::{load_wav, write_wav_pcm16};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("file not found: {0}")]
    MissingFile(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed wav {path}: {reason}")]
    MalformedWav { path: String, reason: String },
    #[error("unsupported wav encoding in {path}: format tag {format_tag}, {bits} bits")]
    UnsupportedEncoding {
        path: String,
        format_tag: u16,
        bits: u16,
    },
    #[error("wav {0} has an empty data payload")]
    EmptyPayload(String),
    #[error("invalid track {track_id}: {reason}")]
    InvalidTrack { track_id: String, reason: String },
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error("invalid segmentation: {0}")]
    InvalidSegmentation(String),
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("class {class} has {tracks} tracks; at least 3 are needed to populate train/val/test")]
    ClassTooSmall { class: usize, tracks: usize },
    #[error("manifest error: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, SignalError>;

/// A full mono recording with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioTrack {
    pub track_id: String,
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub label: usize,
}

impl AudioTrack {
    pub fn new(
        track_id: impl Into<String>,
        samples: Vec<f64>,
        sample_rate: u32,
        label: usize,
    ) -> Result<Self> {
        let track_id = track_id.into();
        let invalid = |reason: &str| SignalError::InvalidTrack {
            track_id: track_id.clone(),
            reason: reason.to_string(),
        };
        if samples.is_empty() {
            return Err(invalid("no samples"));
        }
        if sample_rate == 0 {
            return Err(invalid("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(invalid("non-finite sample"));
        }
        Ok(Self {
            track_id,
            samples,
            sample_rate,
            label,
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// A fixed-length window cut from a parent track.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSegment {
    pub parent_track_id: String,
    /// Position of this segment within its parent, counting from zero.
    pub index: usize,
    /// Seconds from the start of the parent track.
    pub offset: f64,
    pub duration: f64,
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub label: usize,
}

impl AudioSegment {
    /// Stable identifier, used for cache file names.
    pub fn id(&self) -> String {
        format!("{}_s{:03}", self.parent_track_id, self.index)
    }
}
