use std::path::Path;

use super::{Model, ModelError, Result, HEAD_W};
use crate::autodiff::{Graph, Tensor};
use crate::export;
use crate::features::{FeatureKind, Spectrogram};

/// Class activation map of one encoder for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CamMap {
    pub kind: FeatureKind,
    pub class: usize,
    /// `[H' x W']` class-weighted sum of the final feature maps.
    pub raw: Vec<f64>,
    pub raw_shape: (usize, usize),
    /// Bilinear upsampling of `raw` to the input `(frames, bins)`.
    pub upsampled: Vec<f64>,
    pub shape: (usize, usize),
    /// `upsampled` min-max scaled to `[0, 1]`; all 0.5 when constant.
    pub normalized: Vec<f64>,
    /// Embedding of this encoder for the sample.
    pub embedding: Vec<f64>,
}

impl CamMap {
    pub fn raw_mean(&self) -> f64 {
        self.raw.iter().sum::<f64>() / self.raw.len() as f64
    }
}

/// `raw[h, w] = sum_ch W[class, ch] * maps[sample, ch, h, w]`, upsampled to
/// `input` and normalized.
pub fn compute_cam(
    maps: &Tensor,
    sample: usize,
    head_w: &Tensor,
    class: usize,
    input: (usize, usize),
    kind: FeatureKind,
) -> Result<CamMap> {
    let [n, c, h, w] = maps.shape()[..] else {
        return Err(ModelError::InvalidConfig(format!("feature maps must be [N, C, H, W], got {:?}", maps.shape())));
    };
    let [n_classes, d] = head_w.shape()[..] else {
        return Err(ModelError::InvalidConfig(format!("head weights must be a matrix, got {:?}", head_w.shape())));
    };
    if class >= n_classes {
        return Err(ModelError::InvalidClass { class, n_classes });
    }
    if d != c || sample >= n {
        return Err(ModelError::InvalidConfig(format!(
            "maps {:?} incompatible with head {:?} / sample {sample}",
            maps.shape(),
            head_w.shape()
        )));
    }
    let wrow = &head_w.data()[class * d..(class + 1) * d];
    let base = &maps.data()[sample * c * h * w..(sample + 1) * c * h * w];
    let mut raw = vec![0.0; h * w];
    for (ch, wc) in wrow.iter().enumerate() {
        for (r, m) in raw.iter_mut().zip(&base[ch * h * w..(ch + 1) * h * w]) {
            *r += wc * m;
        }
    }
    let embedding = (0..c)
        .map(|ch| base[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
        .collect();
    let upsampled = bilinear(&raw, (h, w), input);
    let normalized = min_max(&upsampled);
    Ok(CamMap {
        kind,
        class,
        raw,
        raw_shape: (h, w),
        upsampled,
        shape: input,
        normalized,
        embedding,
    })
}

/// Half-pixel-centred bilinear resampling with edge clamping.
fn bilinear(src: &[f64], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let (r0, r1, fr) = coord(i, oh, h);
        for j in 0..ow {
            let (c0, c1, fc) = coord(j, ow, w);
            let top = src[r0 * w + c0] * (1.0 - fc) + src[r0 * w + c1] * fc;
            let bot = src[r1 * w + c0] * (1.0 - fc) + src[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bot * fr);
        }
    }
    out
}

fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

impl Model {
    /// CAMs of every encoder for a single sample (`inputs[e]` feeds encoder `e`).
    pub fn cams(&self, inputs: &[&Spectrogram], class: usize) -> Result<Vec<CamMap>> {
        if class >= self.n_classes {
            return Err(ModelError::InvalidClass {
                class,
                n_classes: self.n_classes,
            });
        }
        let mut g = Graph::new();
        let vars = self.params.attach(&mut g);
        let x = self.batch_inputs(&mut g, &[inputs.to_vec()])?;
        let out = self.forward(&mut g, &vars, &x)?;
        let head = self.params.get(HEAD_W).ok_or_else(|| ModelError::MissingParam(HEAD_W.into()))?;
        out.encoders
            .iter()
            .zip(inputs)
            .zip(&self.encoders)
            .map(|((o, s), cfg)| compute_cam(g.value(o.feature_maps), 0, head, class, s.shape(), cfg.kind))
            .collect()
    }
}

/// Grayscale image of the normalized map: time runs left to right, the
/// lowest frequency bin is the bottom row.
pub fn write_cam_pgm(path: impl AsRef<Path>, cam: &CamMap) -> Result<()> {
    let (frames, bins) = cam.shape;
    let mut pixels = Vec::with_capacity(frames * bins);
    for b in (0..bins).rev() {
        for t in 0..frames {
            pixels.push((cam.normalized[t * bins + b] * 255.0).round() as u8);
        }
    }
    export::write_pgm(path.as_ref(), frames, bins, &pixels).map_err(|source| ModelError::Io {
        path: path.as_ref().display().to_string(),
        source,
    })
}

/// Raw `[H' x W']` map, one time step per line.
pub fn write_cam_csv(path: impl AsRef<Path>, cam: &CamMap) -> Result<()> {
    let (h, w) = cam.raw_shape;
    let rows: Vec<Vec<String>> = (0..h)
        .map(|i| cam.raw[i * w..(i + 1) * w].iter().map(|v| format!("{v}")).collect())
        .collect();
    export::write_csv(path.as_ref(), None, &rows).map_err(|source| ModelError::Io {
        path: path.as_ref().display().to_string(),
        source,
    })
}
