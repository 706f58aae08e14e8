//! Frame-based time-frequency features: STFT magnitude, log-Mel and a
//! spectral-kernel (pseudo) constant-Q transform, plus normalization and the
//! on-disk feature cache.

mod cache;
mod cqt;
mod mel;
mod normalize;
mod stft;

pub use cache::{read_feature_cache, write_feature_cache, CachedFeature};
pub use cqt::{cqt_frequencies, cqt_spectrogram, CqtKernelBank};
pub use mel::{build_mel_filterbank, hz_from_mel, mel_scale, mel_spectrogram, MelFilterBank, LOG_FLOOR};
pub use normalize::{normalize_features, FeatureStats, STD_FLOOR};
pub use stft::{hann, stft};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid frame config: {0}")]
    InvalidFrame(String),
    #[error("signal of {samples} samples is shorter than one frame of {frame} samples")]
    TooShort { samples: usize, frame: usize },
    #[error("negative frequency {0} Hz")]
    NegativeFrequency(f64),
    #[error("invalid mel filterbank: {0}")]
    InvalidFilterBank(String),
    #[error("invalid CQT range: {0}")]
    InvalidCqtRange(String),
    #[error("filter bank was built for {expected}, got {actual}")]
    BankMismatch { expected: String, actual: String },
    #[error("statistics are for {stats:?} features but the spectrogram is {input:?}")]
    KindMismatch { stats: FeatureKind, input: FeatureKind },
    #[error("no training spectrograms to compute statistics from")]
    EmptyStatistics,
    #[error("feature cache {path}: {reason}")]
    Cache { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Stft,
    Mel,
    Cqt,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] = [FeatureKind::Stft, FeatureKind::Mel, FeatureKind::Cqt];

    /// Tag byte used by the feature cache.
    pub fn code(self) -> u8 {
        match self {
            FeatureKind::Stft => 0,
            FeatureKind::Mel => 1,
            FeatureKind::Cqt => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Stft => "stft",
            FeatureKind::Mel => "mel",
            FeatureKind::Cqt => "cqt",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            FeatureKind::Stft => "STFT",
            FeatureKind::Mel => "Mel",
            FeatureKind::Cqt => "CQT",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "stft" => Ok(FeatureKind::Stft),
            "mel" => Ok(FeatureKind::Mel),
            "cqt" => Ok(FeatureKind::Cqt),
            other => Err(format!("unknown feature kind `{other}` (expected stft, mel or cqt)")),
        }
    }
}

/// Framing parameters. The analysis window is always Hann and the FFT size
/// is the next power of two at or above the frame length in samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameConfig {
    pub frame_len_ms: f64,
    pub frame_shift_ms: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            frame_len_ms: 50.0,
            frame_shift_ms: 25.0,
        }
    }
}

impl FrameConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_shift_ms > 0.0) || self.frame_shift_ms > self.frame_len_ms {
            return Err(FeatureError::InvalidFrame(format!(
                "need 0 < shift ({}) <= frame length ({})",
                self.frame_shift_ms, self.frame_len_ms
            )));
        }
        Ok(())
    }

    pub fn frame_samples(&self, sample_rate: u32) -> usize {
        (self.frame_len_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn shift_samples(&self, sample_rate: u32) -> usize {
        (self.frame_shift_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn fft_size(&self, sample_rate: u32) -> usize {
        self.frame_samples(sample_rate).max(1).next_power_of_two()
    }

    /// Number of one-sided spectrum bins.
    pub fn n_fft_bins(&self, sample_rate: u32) -> usize {
        self.fft_size(sample_rate) / 2 + 1
    }

    /// `floor((n - frame) / shift) + 1`, or an error when the signal is
    /// shorter than one frame.
    pub fn n_frames(&self, n_samples: usize, sample_rate: u32) -> Result<usize> {
        self.validate()?;
        let frame = self.frame_samples(sample_rate);
        let shift = self.shift_samples(sample_rate);
        if frame == 0 || shift == 0 {
            return Err(FeatureError::InvalidFrame(format!(
                "frame of {} ms is below one sample at {sample_rate} Hz",
                self.frame_shift_ms.min(self.frame_len_ms)
            )));
        }
        if n_samples < frame {
            return Err(FeatureError::TooShort {
                samples: n_samples,
                frame,
            });
        }
        Ok((n_samples - frame) / shift + 1)
    }
}

/// A time-frequency matrix stored row-major as `[n_frames x n_bins]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub kind: FeatureKind,
    pub n_frames: usize,
    pub n_bins: usize,
    pub values: Vec<f64>,
    /// Frame centers, seconds. Empty when loaded from the cache.
    pub frame_times: Vec<f64>,
    /// Bin frequencies (STFT/CQT) or filter centers (Mel), Hz. Empty when
    /// loaded from the cache.
    pub bin_freqs: Vec<f64>,
}

impl Spectrogram {
    pub fn shape(&self) -> (usize, usize) {
        (self.n_frames, self.n_bins)
    }

    pub fn get(&self, frame: usize, bin: usize) -> f64 {
        self.values[frame * self.n_bins + bin]
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        &self.values[frame * self.n_bins..(frame + 1) * self.n_bins]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Rounds every value to single precision, as stored by the cache.
    pub fn quantized(mut self) -> Self {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
        self
    }
}

pub(crate) fn frame_times(n_frames: usize, cfg: &FrameConfig, sample_rate: u32) -> Vec<f64> {
    let frame = cfg.frame_samples(sample_rate) as f64;
    let shift = cfg.shift_samples(sample_rate) as f64;
    (0..n_frames)
        .map(|i| (i as f64 * shift + frame / 2.0) / sample_rate as f64)
        .collect()
}
