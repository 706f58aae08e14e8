use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::stft::{hann, FrameSpectra};
use super::{frame_times, FeatureError, FeatureKind, FrameConfig, Result, Spectrogram};

/// Geometric grid `f_k = 2^(k/b) * f_min` for every `k` with `f_k <= f_max`.
pub fn cqt_frequencies(f_min: f64, f_max: f64, bins_per_octave: u32) -> Result<Vec<f64>> {
    if !(f_min > 0.0 && f_min < f_max) || !f_max.is_finite() {
        return Err(FeatureError::InvalidCqtRange(format!(
            "need 0 < f_min ({f_min}) < f_max ({f_max})"
        )));
    }
    if bins_per_octave == 0 {
        return Err(FeatureError::InvalidCqtRange("bins per octave must be positive".into()));
    }
    let b = bins_per_octave as f64;
    // allow for rounding in log2 when f_max sits exactly on the grid
    let count = (b * (f_max / f_min).log2() + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|k| f_min * 2f64.powf(k as f64 / b)).collect())
}

/// Spectral-domain CQT kernels applied to each frame's FFT.
///
/// Kernel `k` is a Hann-windowed complex exponential at `f_k` of length
/// `ceil(Q * sr / f_k)` (at most the FFT size), centered on the frame
/// center and scaled to unit L1 norm in the time domain.
#[derive(Debug, Clone)]
pub struct CqtKernelBank {
    pub bins_per_octave: u32,
    pub f_min: f64,
    pub f_max: f64,
    pub q: f64,
    pub sample_rate: u32,
    pub fft_size: usize,
    pub frame_samples: usize,
    pub center_freqs: Vec<f64>,
    pub kernel_lengths: Vec<usize>,
    /// Row-major `[n_bins x fft_size]`, already conjugated.
    kernels: Vec<Complex<f64>>,
}

impl CqtKernelBank {
    pub fn new(f_min: f64, f_max: f64, bins_per_octave: u32, cfg: &FrameConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate()?;
        let nyquist = sample_rate as f64 / 2.0;
        if f_max > nyquist {
            return Err(FeatureError::InvalidCqtRange(format!(
                "f_max {f_max} Hz is above Nyquist ({nyquist} Hz)"
            )));
        }
        let center_freqs = cqt_frequencies(f_min, f_max, bins_per_octave)?;
        let q = 1.0 / (2f64.powf(1.0 / bins_per_octave as f64) - 1.0);
        let fft_size = cfg.fft_size(sample_rate);
        let frame_samples = cfg.frame_samples(sample_rate);
        let center = frame_samples / 2;
        let fft = FftPlanner::new().plan_fft_forward(fft_size);

        let mut kernels = Vec::with_capacity(center_freqs.len() * fft_size);
        let mut kernel_lengths = Vec::with_capacity(center_freqs.len());
        for &fk in &center_freqs {
            let len = ((q * sample_rate as f64 / fk).ceil() as usize).clamp(1, fft_size);
            let time = Self::time_kernel(fk, len, sample_rate, center, fft_size);
            let mut buf = time;
            fft.process(&mut buf);
            kernels.extend(buf.iter().map(|c| c.conj()));
            kernel_lengths.push(len);
        }
        Ok(Self {
            bins_per_octave,
            f_min,
            f_max,
            q,
            sample_rate,
            fft_size,
            frame_samples,
            center_freqs,
            kernel_lengths,
            kernels,
        })
    }

    /// Time-domain kernel placed in an `fft_size` buffer (circularly) so that
    /// its center coincides with `center`.
    pub(crate) fn time_kernel(fk: f64, len: usize, sample_rate: u32, center: usize, fft_size: usize) -> Vec<Complex<f64>> {
        let w = hann(len);
        let norm: f64 = w.iter().sum();
        let half = len / 2;
        let mut out = vec![Complex::new(0.0, 0.0); fft_size];
        for (n, wn) in w.iter().enumerate() {
            let phase = 2.0 * PI * fk * (n as f64 - half as f64) / sample_rate as f64;
            let pos = (center + fft_size * 2 + n - half) % fft_size;
            out[pos] += Complex::from_polar(wn / norm, phase);
        }
        out
    }

    pub fn n_bins(&self) -> usize {
        self.center_freqs.len()
    }

    fn row(&self, k: usize) -> &[Complex<f64>] {
        &self.kernels[k * self.fft_size..(k + 1) * self.fft_size]
    }

    /// Magnitude response of every bin to one frame spectrum.
    pub(crate) fn apply(&self, spectrum: &[Complex<f64>], out: &mut Vec<f64>) {
        let scale = 1.0 / self.fft_size as f64;
        for k in 0..self.n_bins() {
            let acc: Complex<f64> = self
                .row(k)
                .iter()
                .zip(spectrum)
                .fold(Complex::new(0.0, 0.0), |a, (kc, x)| a + kc * x);
            out.push(acc.norm() * scale);
        }
    }
}

/// Per-frame CQT magnitudes, shape `[n_frames x n_bins]`.
pub fn cqt_spectrogram(
    samples: &[f64],
    sample_rate: u32,
    cfg: &FrameConfig,
    bank: &CqtKernelBank,
) -> Result<Spectrogram> {
    if bank.sample_rate != sample_rate || bank.fft_size != cfg.fft_size(sample_rate) || bank.frame_samples != cfg.frame_samples(sample_rate) {
        return Err(FeatureError::BankMismatch {
            expected: format!("{} Hz / {}-sample frames", bank.sample_rate, bank.frame_samples),
            actual: format!("{} Hz / {}-sample frames", sample_rate, cfg.frame_samples(sample_rate)),
        });
    }
    let mut frames = FrameSpectra::new(samples, sample_rate, cfg)?;
    let n_frames = frames.n_frames();
    let mut values = Vec::with_capacity(n_frames * bank.n_bins());
    for t in 0..n_frames {
        bank.apply(frames.spectrum(t), &mut values);
    }
    Ok(Spectrogram {
        kind: FeatureKind::Cqt,
        n_frames,
        n_bins: bank.n_bins(),
        values,
        frame_times: frame_times(n_frames, cfg, sample_rate),
        bin_freqs: bank.center_freqs.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, sr: u32, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * PI * freq * i as f64 / sr as f64).sin())
            .collect()
    }

    #[test]
    fn grid_values() {
        let f = cqt_frequencies(100.0, 400.0, 36).unwrap();
        assert_eq!(f.len(), 73);
        assert!((f[36] - 200.0).abs() < 1e-9);
        assert!((f[1] - 101.944).abs() < 1e-3);
        assert!((f[1] - 100.0 * 2f64.powf(1.0 / 36.0)).abs() < 1e-12);
        let ratio = 2f64.powf(1.0 / 36.0);
        for w in f.windows(2) {
            assert!((w[1] / w[0] - ratio).abs() < 1e-12);
        }
        assert!(*f.last().unwrap() <= 400.0 + 1e-9);
    }

    #[test]
    fn grid_count_formula() {
        for &(lo, hi, b) in &[(50.0, 3800.0, 36u32), (32.7, 8000.0, 12), (100.0, 150.0, 24)] {
            let f = cqt_frequencies(lo, hi, b).unwrap();
            assert_eq!(f.len(), (b as f64 * (hi / lo).log2()).floor() as usize + 1);
        }
        assert!(cqt_frequencies(400.0, 100.0, 36).is_err());
        assert!(cqt_frequencies(0.0, 100.0, 36).is_err());
    }

    #[test]
    fn rejects_f_max_above_nyquist() {
        let cfg = FrameConfig::default();
        assert!(CqtKernelBank::new(100.0, 2500.0, 36, &cfg, 4000).is_err());
    }

    #[test]
    fn tone_on_a_bin_center() {
        let sr = 16_000;
        let cfg = FrameConfig::default();
        let bank = CqtKernelBank::new(200.0, 7000.0, 36, &cfg, sr).unwrap();
        // mid-range bin whose kernel is shorter than the frame
        let k = bank.n_bins() * 2 / 3;
        assert!(bank.kernel_lengths[k] < bank.frame_samples);
        let x = tone(bank.center_freqs[k], sr, sr as usize / 2);
        let c = cqt_spectrogram(&x, sr, &cfg, &bank).unwrap();
        for t in 0..c.n_frames {
            let row = c.row(t);
            let arg = (0..c.n_bins).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
            assert_eq!(arg, k);
        }
    }

    #[test]
    fn silence_is_zero() {
        let cfg = FrameConfig::default();
        let bank = CqtKernelBank::new(50.0, 1900.0, 36, &cfg, 4000).unwrap();
        let c = cqt_spectrogram(&vec![0.0; 4000], 4000, &cfg, &bank).unwrap();
        assert!(c.values.iter().all(|&v| v == 0.0));
    }

    /// Inner product of the windowed frame with the time-domain kernel,
    /// computed without any FFT.
    fn direct_response(x: &[f64], cfg: &FrameConfig, sr: u32, fk: f64, len: usize) -> f64 {
        let frame = cfg.frame_samples(sr);
        let fft_size = cfg.fft_size(sr);
        let w = hann(frame);
        let kernel = CqtKernelBank::time_kernel(fk, len, sr, frame / 2, fft_size);
        let mut acc = Complex::new(0.0, 0.0);
        for n in 0..frame {
            acc += kernel[n].conj() * (x[n] * w[n]);
        }
        acc.norm()
    }

    #[test]
    fn octave_rejection_against_direct_inner_product() {
        let sr = 16_000;
        let cfg = FrameConfig::default();
        let bank = CqtKernelBank::new(200.0, 7000.0, 36, &cfg, sr).unwrap();
        let k = bank.n_bins() / 2;
        let fk = bank.center_freqs[k];
        let n = cfg.frame_samples(sr);
        let own = tone(fk, sr, n);
        let octave = tone(fk * 2.0, sr, n);
        let len = bank.kernel_lengths[k];

        let a = cqt_spectrogram(&own, sr, &cfg, &bank).unwrap().get(0, k);
        let b = cqt_spectrogram(&octave, sr, &cfg, &bank).unwrap().get(0, k);
        let da = direct_response(&own, &cfg, sr, fk, len);
        let db = direct_response(&octave, &cfg, sr, fk, len);
        assert!((a - da).abs() < 1e-12 * da.max(1.0));
        assert!((b - db).abs() < 1e-12 * da.max(1.0));
        assert!(da / db > 10.0, "ratio {}", da / db);
        assert!(a / b > 10.0);
    }
}
