//! Synthetic ship-radiated noise: low-frequency line spectra plus an
//! amplitude-modulated high-frequency noise carrier, buried in white noise.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{AudioTrack, Result, SignalError};

/// Per-class acoustic signature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// Tonal components below the carrier band, Hz.
    pub line_freqs: Vec<f64>,
    /// Envelope rate of the carrier, Hz.
    pub mod_rate: f64,
    /// Envelope depth in [0, 1].
    pub mod_depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSpec {
    pub classes: Vec<ClassSpec>,
    /// Band of the modulated noise carrier, Hz.
    pub carrier_band: (f64, f64),
    /// Signal-to-noise ratio of the additive white noise; `None` disables it.
    pub snr_db: Option<f64>,
    pub tracks_per_class: usize,
    /// Seconds.
    pub track_duration: f64,
    pub sample_rate: u32,
    pub seed: u64,
    /// Amplitude of each line component.
    #[serde(default = "one")]
    pub line_amplitude: f64,
    /// RMS of the unmodulated carrier.
    #[serde(default = "one")]
    pub carrier_amplitude: f64,
    /// Relative per-track jitter of the line frequencies (uniform in
    /// `[-jitter, jitter]`).
    #[serde(default)]
    pub freq_jitter: f64,
}

fn one() -> f64 {
    1.0
}

impl SynthesisSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SignalError::InvalidSpec(m));
        if self.classes.is_empty() {
            return bad("no classes".into());
        }
        if self.tracks_per_class == 0 {
            return bad("tracks_per_class must be at least 1".into());
        }
        if !(self.track_duration > 0.0) || !self.track_duration.is_finite() {
            return bad(format!("track duration {} must be positive", self.track_duration));
        }
        if self.sample_rate == 0 {
            return bad("sample rate must be positive".into());
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        let (lo, hi) = self.carrier_band;
        if !(lo > 0.0 && lo < hi && hi <= nyquist) {
            return bad(format!(
                "carrier band ({lo}, {hi}) must satisfy 0 < lo < hi <= Nyquist ({nyquist})"
            ));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return bad("SNR must be finite (omit it for a noiseless signal)".into());
            }
        }
        if !(0.0..0.5).contains(&self.freq_jitter) {
            return bad(format!("freq_jitter {} outside [0, 0.5)", self.freq_jitter));
        }
        for c in &self.classes {
            for &f in &c.line_freqs {
                if !(f > 0.0) || f * (1.0 + self.freq_jitter) >= lo {
                    return bad(format!(
                        "class {}: line at {f} Hz must lie in (0, {lo}) including jitter",
                        c.name
                    ));
                }
            }
            if !(0.0..=1.0).contains(&c.mod_depth) {
                return bad(format!("class {}: depth {} outside [0, 1]", c.name, c.mod_depth));
            }
            if !(c.mod_rate >= 0.0) || c.mod_rate > lo / 10.0 {
                return bad(format!(
                    "class {}: modulation rate {} must be non-negative and well below the carrier ({lo} Hz)",
                    c.name, c.mod_rate
                ));
            }
        }
        Ok(())
    }
}

/// Generates `tracks_per_class` tracks for every class. Output order is
/// class-major and fully determined by the spec, including its seed.
pub fn synthesize_dataset(spec: &SynthesisSpec) -> Result<Vec<AudioTrack>> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut jobs = Vec::new();
    for label in 0..spec.classes.len() {
        for t in 0..spec.tracks_per_class {
            jobs.push((label, t, master.random::<u64>()));
        }
    }
    jobs.into_iter()
        .map(|(label, t, seed)| {
            let samples = synthesize_track(spec, label, seed)?;
            let id = format!("{}-{:02}", spec.classes[label].name, t);
            AudioTrack::new(id, samples, spec.sample_rate, label)
        })
        .collect()
}

/// One track of class `label`, driven by its own seed.
pub fn synthesize_track(spec: &SynthesisSpec, label: usize, seed: u64) -> Result<Vec<f64>> {
    let class = spec
        .classes
        .get(label)
        .ok_or_else(|| SignalError::InvalidSpec(format!("no class {label}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = spec.sample_rate as f64;
    let n = (spec.track_duration * sr).round() as usize;
    if n == 0 {
        return Err(SignalError::InvalidSpec("track has no samples".into()));
    }

    let mut signal = vec![0.0; n];
    for &f in &class.line_freqs {
        let jitter = if spec.freq_jitter > 0.0 {
            rng.random_range(-spec.freq_jitter..=spec.freq_jitter)
        } else {
            0.0
        };
        let freq = f * (1.0 + jitter);
        let phase = rng.random_range(0.0..2.0 * PI);
        for (i, s) in signal.iter_mut().enumerate() {
            *s += spec.line_amplitude * (2.0 * PI * freq * i as f64 / sr + phase).sin();
        }
    }

    let carrier = band_limited_noise(n, sr, spec.carrier_band, &mut rng);
    let mod_phase = rng.random_range(0.0..2.0 * PI);
    for (i, (s, c)) in signal.iter_mut().zip(&carrier).enumerate() {
        let t = i as f64 / sr;
        let env = 1.0 + class.mod_depth * (2.0 * PI * class.mod_rate * t + mod_phase).sin();
        *s += spec.carrier_amplitude * env * c;
    }

    if let Some(snr_db) = spec.snr_db {
        let power = signal.iter().map(|x| x * x).sum::<f64>() / n as f64;
        let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
        for s in signal.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *s += sigma * z;
        }
    }

    let peak = signal.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        let gain = 0.9 / peak;
        signal.iter_mut().for_each(|s| *s *= gain);
    }
    Ok(signal)
}

/// Unit-RMS Gaussian noise confined to `band` with raised-cosine edges
/// occupying a quarter of the band on each side.
fn band_limited_noise(n: usize, sr: f64, band: (f64, f64), rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let (lo, hi) = band;
    let edge = 0.25 * (hi - lo);
    for (k, v) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        let f = bin as f64 * sr / n as f64;
        *v *= band_gain(f, lo, hi, edge);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let mut out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let rms = (out.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|x| *x /= rms);
    }
    out
}

fn band_gain(f: f64, lo: f64, hi: f64, edge: f64) -> f64 {
    if f <= lo || f >= hi {
        0.0
    } else if f < lo + edge {
        0.5 - 0.5 * (PI * (f - lo) / edge).cos()
    } else if f > hi - edge {
        0.5 - 0.5 * (PI * (hi - f) / edge).cos()
    } else {
        1.0
    }
}
