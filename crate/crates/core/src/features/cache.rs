//! Binary feature cache.
//!
//! Layout (little endian): `b"ICLF"`, version `u16`, kind `u8`,
//! n_frames `u32`, n_bins `u32`, label `u32`, then `n_frames * n_bins`
//! row-major `f32` values.

use std::fs;
use std::path::Path;

use super::{FeatureError, FeatureKind, Result, Spectrogram};

const MAGIC: &[u8; 4] = b"ICLF";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 4 + 4 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct CachedFeature {
    pub kind: FeatureKind,
    pub n_frames: usize,
    pub n_bins: usize,
    pub label: usize,
    pub values: Vec<f32>,
}

impl CachedFeature {
    pub fn to_spectrogram(&self) -> Spectrogram {
        Spectrogram {
            kind: self.kind,
            n_frames: self.n_frames,
            n_bins: self.n_bins,
            values: self.values.iter().map(|&v| v as f64).collect(),
            frame_times: Vec::new(),
            bin_freqs: Vec::new(),
        }
    }
}

pub fn write_feature_cache(path: impl AsRef<Path>, spec: &Spectrogram, label: usize) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * spec.values.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(spec.kind.code());
    buf.extend_from_slice(&(spec.n_frames as u32).to_le_bytes());
    buf.extend_from_slice(&(spec.n_bins as u32).to_le_bytes());
    buf.extend_from_slice(&(label as u32).to_le_bytes());
    for &v in &spec.values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_feature_cache(path: impl AsRef<Path>) -> Result<CachedFeature> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let bad = |reason: &str| FeatureError::Cache {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_LEN || &bytes[0..4] != MAGIC {
        return Err(bad("missing ICLF header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let kind = FeatureKind::from_code(bytes[6]).ok_or_else(|| bad("unknown feature kind"))?;
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let n_frames = u32_at(7);
    let n_bins = u32_at(11);
    let label = u32_at(15);
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != n_frames * n_bins * 4 {
        return Err(bad(&format!(
            "payload has {} bytes, header promises {}",
            payload.len(),
            n_frames * n_bins * 4
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(CachedFeature {
        kind,
        n_frames,
        n_bins,
        label,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            frames in 1usize..12,
            bins in 1usize..9,
            label in 0usize..10,
            kind in 0u8..3,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..frames * bins)
                .map(|_| (rng.random::<f64>() * 200.0 - 100.0) as f32 as f64)
                .collect();
            let spec = Spectrogram {
                kind: FeatureKind::from_code(kind).unwrap(),
                n_frames: frames,
                n_bins: bins,
                values,
                frame_times: vec![],
                bin_freqs: vec![],
            };
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("f.iclf");
            write_feature_cache(&p, &spec, label).unwrap();
            let back = read_feature_cache(&p).unwrap();
            prop_assert_eq!(back.label, label);
            prop_assert_eq!(back.kind, spec.kind);
            let restored = back.to_spectrogram();
            prop_assert_eq!(restored.shape(), spec.shape());
            for (a, b) in restored.values.iter().zip(&spec.values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn header_layout() {
        let spec = Spectrogram {
            kind: FeatureKind::Cqt,
            n_frames: 2,
            n_bins: 3,
            values: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            frame_times: vec![],
            bin_freqs: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.iclf");
        write_feature_cache(&p, &spec, 7).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"ICLF");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 2);
        assert_eq!(&bytes[7..11], &[2, 0, 0, 0]);
        assert_eq!(&bytes[11..15], &[3, 0, 0, 0]);
        assert_eq!(&bytes[15..19], &[7, 0, 0, 0]);
        assert_eq!(bytes.len(), 19 + 24);
        assert_eq!(&bytes[23..27], &1.0f32.to_le_bytes());

        let truncated = dir.path().join("t.iclf");
        fs::write(&truncated, &bytes[..30]).unwrap();
        assert!(matches!(read_feature_cache(&truncated), Err(FeatureError::Cache { .. })));
    }
}
