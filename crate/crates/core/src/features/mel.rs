use super::stft::power_frames;
use super::{frame_times, FeatureError, FeatureKind, FrameConfig, Result, Spectrogram};

/// Floor added before the logarithm so silence maps to `log10(1e-10) = -10`.
pub const LOG_FLOOR: f64 = 1e-10;

/// `2595 * log10(1 + f / 700)`.
pub fn mel_scale(f: f64) -> Result<f64> {
    if f < 0.0 {
        return Err(FeatureError::NegativeFrequency(f));
    }
    Ok(2595.0 * (1.0 + f / 700.0).log10())
}

pub fn hz_from_mel(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters spaced uniformly on the Mel axis between 0 Hz and
/// Nyquist. Each row is scaled so its largest weight is exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterBank {
    pub n_filters: usize,
    pub n_fft_bins: usize,
    pub sample_rate: u32,
    pub fft_size: usize,
    /// Row-major `[n_filters x n_fft_bins]`.
    pub weights: Vec<f64>,
    pub center_freqs: Vec<f64>,
    /// Lower and upper edge of every triangle, Hz.
    pub edges: Vec<(f64, f64)>,
}

impl MelFilterBank {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.weights[k * self.n_fft_bins..(k + 1) * self.n_fft_bins]
    }
}

pub fn build_mel_filterbank(n_filters: usize, cfg: &FrameConfig, sample_rate: u32) -> Result<MelFilterBank> {
    cfg.validate()?;
    if n_filters == 0 {
        return Err(FeatureError::InvalidFilterBank("need at least one filter".into()));
    }
    let fft_size = cfg.fft_size(sample_rate);
    let n_bins = fft_size / 2 + 1;
    if n_filters > n_bins {
        return Err(FeatureError::InvalidFilterBank(format!(
            "{n_filters} filters exceed the {n_bins} available FFT bins"
        )));
    }
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = mel_scale(nyquist)?;
    let points: Vec<f64> = (0..n_filters + 2)
        .map(|i| hz_from_mel(mel_max * i as f64 / (n_filters + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / fft_size as f64;

    let mut weights = vec![0.0; n_filters * n_bins];
    for k in 0..n_filters {
        let (lo, c, hi) = (points[k], points[k + 1], points[k + 2]);
        let row = &mut weights[k * n_bins..(k + 1) * n_bins];
        for (j, w) in row.iter_mut().enumerate() {
            let f = j as f64 * bin_hz;
            *w = if f > lo && f < c {
                (f - lo) / (c - lo)
            } else if f >= c && f < hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
        }
        let peak = row.iter().cloned().fold(0.0, f64::max);
        if peak <= 0.0 {
            return Err(FeatureError::InvalidFilterBank(format!(
                "filter {k} ({lo:.1}-{hi:.1} Hz) covers no FFT bin; {n_filters} filters exceed the resolution of a {fft_size}-point FFT"
            )));
        }
        row.iter_mut().for_each(|w| *w /= peak);
    }
    Ok(MelFilterBank {
        n_filters,
        n_fft_bins: n_bins,
        sample_rate,
        fft_size,
        weights,
        center_freqs: points[1..=n_filters].to_vec(),
        edges: (0..n_filters).map(|k| (points[k], points[k + 2])).collect(),
    })
}

/// `log10(bank * |X|^2 + 1e-10)`, shape `[n_frames x n_filters]`.
pub fn mel_spectrogram(
    samples: &[f64],
    sample_rate: u32,
    cfg: &FrameConfig,
    bank: &MelFilterBank,
) -> Result<Spectrogram> {
    if bank.sample_rate != sample_rate || bank.fft_size != cfg.fft_size(sample_rate) {
        return Err(FeatureError::BankMismatch {
            expected: format!("{} Hz / {}-point FFT", bank.sample_rate, bank.fft_size),
            actual: format!("{} Hz / {}-point FFT", sample_rate, cfg.fft_size(sample_rate)),
        });
    }
    let (n_frames, n_bins, power) = power_frames(samples, sample_rate, cfg)?;
    let mut values = Vec::with_capacity(n_frames * bank.n_filters);
    for t in 0..n_frames {
        let p = &power[t * n_bins..(t + 1) * n_bins];
        for k in 0..bank.n_filters {
            let e: f64 = bank.row(k).iter().zip(p).map(|(w, x)| w * x).sum();
            values.push((e + LOG_FLOOR).log10());
        }
    }
    Ok(Spectrogram {
        kind: FeatureKind::Mel,
        n_frames,
        n_bins: bank.n_filters,
        values,
        frame_times: frame_times(n_frames, cfg, sample_rate),
        bin_freqs: bank.center_freqs.clone(),
    })
}
