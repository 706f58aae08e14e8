use serde::{Deserialize, Serialize};

use super::{FeatureError, FeatureKind, Result, Spectrogram};

pub const STD_FLOOR: f64 = 1e-8;

/// Global mean and standard deviation of one feature kind over the
/// training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub kind: FeatureKind,
    pub mean: f64,
    pub std: f64,
}

impl FeatureStats {
    pub fn from_training<'a>(kind: FeatureKind, specs: impl IntoIterator<Item = &'a Spectrogram>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum = 0.0;
        let mut all: Vec<&Spectrogram> = Vec::new();
        for s in specs {
            if s.kind != kind {
                return Err(FeatureError::KindMismatch { stats: kind, input: s.kind });
            }
            count += s.values.len();
            sum += s.values.iter().sum::<f64>();
            all.push(s);
        }
        if count == 0 {
            return Err(FeatureError::EmptyStatistics);
        }
        let mean = sum / count as f64;
        let var = all
            .iter()
            .flat_map(|s| s.values.iter())
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / count as f64;
        Ok(Self {
            kind,
            mean,
            std: var.sqrt(),
        })
    }
}

/// `(x - mean) / max(std, 1e-8)` with the training statistics.
pub fn normalize_features(stats: &FeatureStats, spec: &Spectrogram) -> Result<Spectrogram> {
    if stats.kind != spec.kind {
        return Err(FeatureError::KindMismatch {
            stats: stats.kind,
            input: spec.kind,
        });
    }
    let scale = 1.0 / stats.std.max(STD_FLOOR);
    let mut out = spec.clone();
    for v in &mut out.values {
        *v = (*v - stats.mean) * scale;
    }
    Ok(out)
}
