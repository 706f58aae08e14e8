use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{frame_times, FeatureKind, FrameConfig, Result, Spectrogram};

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Iterates Hann-windowed, zero-padded frames and their full complex FFT.
pub(crate) struct FrameSpectra<'a> {
    samples: &'a [f64],
    window: Vec<f64>,
    shift: usize,
    fft_size: usize,
    n_frames: usize,
    fft: Arc<dyn Fft<f64>>,
    buf: Vec<Complex<f64>>,
}

impl<'a> FrameSpectra<'a> {
    pub(crate) fn new(samples: &'a [f64], sample_rate: u32, cfg: &FrameConfig) -> Result<Self> {
        let n_frames = cfg.n_frames(samples.len(), sample_rate)?;
        let fft_size = cfg.fft_size(sample_rate);
        Ok(Self {
            samples,
            window: hann(cfg.frame_samples(sample_rate)),
            shift: cfg.shift_samples(sample_rate),
            fft_size,
            n_frames,
            fft: FftPlanner::new().plan_fft_forward(fft_size),
            buf: vec![Complex::new(0.0, 0.0); fft_size],
        })
    }

    pub(crate) fn n_frames(&self) -> usize {
        self.n_frames
    }

    #[cfg(test)]
    /// Windowed time-domain samples of frame `i` (length = frame length).
    pub(crate) fn windowed(&self, i: usize) -> Vec<f64> {
        let start = i * self.shift;
        self.samples[start..start + self.window.len()]
            .iter()
            .zip(&self.window)
            .map(|(x, w)| x * w)
            .collect()
    }

    /// Full-length complex spectrum of frame `i`.
    pub(crate) fn spectrum(&mut self, i: usize) -> &[Complex<f64>] {
        let start = i * self.shift;
        let frame = &self.samples[start..start + self.window.len()];
        for (k, slot) in self.buf.iter_mut().enumerate() {
            *slot = match (frame.get(k), self.window.get(k)) {
                (Some(x), Some(w)) => Complex::new(x * w, 0.0),
                _ => Complex::new(0.0, 0.0),
            };
        }
        self.fft.process(&mut self.buf);
        &self.buf
    }

    pub(crate) fn fft_size(&self) -> usize {
        self.fft_size
    }
}

/// One-sided STFT magnitude, `[n_frames x (fft_size/2 + 1)]`.
pub fn stft(samples: &[f64], sample_rate: u32, cfg: &FrameConfig) -> Result<Spectrogram> {
    let mut frames = FrameSpectra::new(samples, sample_rate, cfg)?;
    let n_frames = frames.n_frames();
    let fft_size = frames.fft_size();
    let n_bins = fft_size / 2 + 1;
    let mut values = Vec::with_capacity(n_frames * n_bins);
    for i in 0..n_frames {
        let spec = frames.spectrum(i);
        values.extend(spec[..n_bins].iter().map(|c| c.norm()));
    }
    Ok(Spectrogram {
        kind: FeatureKind::Stft,
        n_frames,
        n_bins,
        values,
        frame_times: frame_times(n_frames, cfg, sample_rate),
        bin_freqs: (0..n_bins)
            .map(|k| k as f64 * sample_rate as f64 / fft_size as f64)
            .collect(),
    })
}

/// One-sided power spectrum per frame, used by the Mel front-end.
pub(crate) fn power_frames(samples: &[f64], sample_rate: u32, cfg: &FrameConfig) -> Result<(usize, usize, Vec<f64>)> {
    let mut frames = FrameSpectra::new(samples, sample_rate, cfg)?;
    let n_frames = frames.n_frames();
    let n_bins = frames.fft_size() / 2 + 1;
    let mut out = Vec::with_capacity(n_frames * n_bins);
    for i in 0..n_frames {
        out.extend(frames.spectrum(i)[..n_bins].iter().map(|c| c.norm_sqr()));
    }
    Ok((n_frames, n_bins, out))
}
