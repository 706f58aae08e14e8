//! Residual convolutional encoders, the shared linear head, and class
//! activation maps.

mod cam;

pub use cam::{compute_cam, write_cam_csv, write_cam_pgm, CamMap};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Padding, ParamStore, Tensor, Var};
use crate::features::{FeatureKind, Spectrogram};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("{kind} encoder expects input {expected}, got {actual}")]
    InputShape {
        kind: FeatureKind,
        expected: String,
        actual: String,
    },
    #[error("class {class} out of range for {n_classes} classes")]
    InvalidClass { class: usize, n_classes: usize },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Smallest time or frequency extent an encoder accepts.
pub const MIN_INPUT_EXTENT: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: FeatureKind,
    pub stem_channels: usize,
    pub blocks_per_stage: usize,
    pub widths: Vec<usize>,
    pub embedding_dim: usize,
    /// Expected `(frames, bins)`; checked on every forward when set.
    #[serde(default)]
    pub input_shape: Option<(usize, usize)>,
}

impl EncoderConfig {
    /// Full-size encoder with a 512-dimensional embedding.
    pub fn standard(kind: FeatureKind) -> Self {
        Self {
            kind,
            stem_channels: 64,
            blocks_per_stage: 2,
            widths: vec![128, 256, 512],
            embedding_dim: 512,
            input_shape: None,
        }
    }

    /// Laptop-sized encoder with a 64-dimensional embedding.
    pub fn desk(kind: FeatureKind) -> Self {
        Self {
            kind,
            stem_channels: 16,
            blocks_per_stage: 2,
            widths: vec![16, 32, 64],
            embedding_dim: 64,
            input_shape: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.stem_channels == 0 || self.blocks_per_stage == 0 {
            return bad("stem channels and blocks per stage must be positive".into());
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("stage widths {:?} must be non-empty and positive", self.widths));
        }
        if self.widths.last() != Some(&self.embedding_dim) {
            return bad(format!(
                "embedding_dim {} must equal the last stage width {:?}",
                self.embedding_dim,
                self.widths.last()
            ));
        }
        if let Some((f, b)) = self.input_shape {
            if f < MIN_INPUT_EXTENT || b < MIN_INPUT_EXTENT {
                return bad(format!("input shape ({f}, {b}) is below the {MIN_INPUT_EXTENT}x{MIN_INPUT_EXTENT} minimum"));
            }
        }
        Ok(())
    }

    fn prefix(&self) -> &'static str {
        self.kind.name()
    }

    /// Names and shapes of every parameter, in creation order.
    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let p = self.prefix();
        let mut out = vec![
            (format!("{p}.stem.w"), vec![self.stem_channels, 1, 3, 3]),
            (format!("{p}.stem.b"), vec![self.stem_channels]),
        ];
        let mut c_in = self.stem_channels;
        for (s, &c) in self.widths.iter().enumerate() {
            for b in 0..self.blocks_per_stage {
                let stride = if b == 0 && s > 0 { 2 } else { 1 };
                let n = format!("{p}.s{s}.b{b}");
                out.push((format!("{n}.conv1.w"), vec![c, c_in, 3, 3]));
                out.push((format!("{n}.conv1.b"), vec![c]));
                out.push((format!("{n}.conv2.w"), vec![c, c, 3, 3]));
                out.push((format!("{n}.conv2.b"), vec![c]));
                if stride != 1 || c_in != c {
                    out.push((format!("{n}.proj.w"), vec![c, c_in, 1, 1]));
                    out.push((format!("{n}.proj.b"), vec![c]));
                }
                c_in = c;
            }
        }
        out
    }
}

/// He-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases.
fn init_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    if shape.len() == 1 {
        return Tensor::zeros(shape);
    }
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
}

/// Pre-pool feature maps and their channel means.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// `[N, C, H', W']`.
    pub feature_maps: Var,
    /// `[N, embedding_dim]`.
    pub embedding: Var,
}

type Params<'a> = &'a BTreeMap<String, Var>;

fn param(vars: Params, name: &str) -> Result<Var> {
    vars.get(name).copied().ok_or_else(|| ModelError::MissingParam(name.to_string()))
}

/// Encoder forward pass; `x` is `[N, 1, frames, bins]`.
pub fn encoder_forward(cfg: &EncoderConfig, g: &mut Graph, vars: Params, x: Var) -> Result<EncoderOutput> {
    let shape = g.shape(x).to_vec();
    let ok = match shape[..] {
        [_, 1, f, b] => cfg.input_shape.map_or(f >= MIN_INPUT_EXTENT && b >= MIN_INPUT_EXTENT, |s| s == (f, b)),
        _ => false,
    };
    if !ok {
        return Err(ModelError::InputShape {
            kind: cfg.kind,
            expected: match cfg.input_shape {
                Some((f, b)) => format!("[N, 1, {f}, {b}]"),
                None => format!("[N, 1, >={MIN_INPUT_EXTENT}, >={MIN_INPUT_EXTENT}]"),
            },
            actual: format!("{shape:?}"),
        });
    }
    let p = cfg.prefix();
    let conv = |g: &mut Graph, x: Var, name: &str, stride: usize| -> Result<Var> {
        let w = param(vars, &format!("{name}.w"))?;
        let b = param(vars, &format!("{name}.b"))?;
        Ok(g.conv2d(x, w, Some(b), stride, Padding::Same)?)
    };

    let mut h = conv(g, x, &format!("{p}.stem"), 2)?;
    h = g.relu(h)?;
    let [_, _, hh, hw] = g.shape(h)[..] else { unreachable!() };
    if hh >= 2 && hw >= 2 {
        h = g.avg_pool2d(h, 2)?;
    }
    let mut c_in = cfg.stem_channels;
    for (s, &c) in cfg.widths.iter().enumerate() {
        for b in 0..cfg.blocks_per_stage {
            let stride = if b == 0 && s > 0 { 2 } else { 1 };
            let n = format!("{p}.s{s}.b{b}");
            let y = conv(g, h, &format!("{n}.conv1"), stride)?;
            let y = g.relu(y)?;
            let y = conv(g, y, &format!("{n}.conv2"), 1)?;
            let shortcut = if stride != 1 || c_in != c {
                conv(g, h, &format!("{n}.proj"), stride)?
            } else {
                h
            };
            let y = g.add(y, shortcut)?;
            h = g.relu(y)?;
            c_in = c;
        }
    }
    let embedding = g.global_avg_pool(h)?;
    Ok(EncoderOutput {
        feature_maps: h,
        embedding,
    })
}

/// `logits = E W^T + b` with `W: [n_classes, D]`.
pub fn classify(g: &mut Graph, vars: Params, embedding: Var) -> Result<Var> {
    let w = param(vars, HEAD_W)?;
    let b = param(vars, HEAD_B)?;
    Ok(g.linear(embedding, w, b)?)
}

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

/// One or two encoders whose embeddings are summed before the shared head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoders: Vec<EncoderConfig>,
    pub n_classes: usize,
    pub params: ParamStore,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub encoders: Vec<EncoderOutput>,
    /// Sum of the encoder embeddings.
    pub embedding: Var,
    pub logits: Var,
}

impl Model {
    pub fn new(encoders: Vec<EncoderConfig>, n_classes: usize, seed: u64) -> Result<Self> {
        if encoders.is_empty() {
            return Err(ModelError::InvalidConfig("at least one encoder is required".into()));
        }
        if n_classes < 2 {
            return Err(ModelError::InvalidConfig(format!("need at least 2 classes, got {n_classes}")));
        }
        let dim = encoders[0].embedding_dim;
        for (i, e) in encoders.iter().enumerate() {
            e.validate()?;
            if e.embedding_dim != dim {
                return Err(ModelError::InvalidConfig(format!(
                    "summed embeddings need equal dimensions, got {dim} and {}",
                    e.embedding_dim
                )));
            }
            if encoders[..i].iter().any(|o| o.kind == e.kind) {
                return Err(ModelError::InvalidConfig(format!("duplicate {} encoder", e.kind)));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for e in &encoders {
            for (name, shape) in e.layout() {
                params.insert(name, init_tensor(&shape, &mut rng));
            }
        }
        params.insert(HEAD_W, init_tensor(&[n_classes, dim], &mut rng));
        params.insert(HEAD_B, Tensor::zeros(&[n_classes]));
        Ok(Self {
            encoders,
            n_classes,
            params,
        })
    }

    /// Replace the parameters, checking names and shapes against the layout.
    pub fn with_params(mut self, params: ParamStore) -> Result<Self> {
        for (name, t) in self.params.iter() {
            let Some(p) = params.get(name) else {
                return Err(ModelError::MissingParam(name.clone()));
            };
            if p.shape() != t.shape() {
                return Err(ModelError::InvalidConfig(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    p.shape(),
                    t.shape()
                )));
            }
        }
        self.params = params;
        Ok(self)
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoders[0].embedding_dim
    }

    pub fn kinds(&self) -> Vec<FeatureKind> {
        self.encoders.iter().map(|e| e.kind).collect()
    }

    /// Forward every encoder on its input (same order as `encoders`).
    pub fn forward(&self, g: &mut Graph, vars: Params, inputs: &[Var]) -> Result<ModelOutput> {
        if inputs.len() != self.encoders.len() {
            return Err(ModelError::InvalidConfig(format!(
                "{} inputs for {} encoders",
                inputs.len(),
                self.encoders.len()
            )));
        }
        let outs = self
            .encoders
            .iter()
            .zip(inputs)
            .map(|(cfg, &x)| encoder_forward(cfg, g, vars, x))
            .collect::<Result<Vec<_>>>()?;
        let mut embedding = outs[0].embedding;
        for o in &outs[1..] {
            embedding = g.add(embedding, o.embedding)?;
        }
        let logits = classify(g, vars, embedding)?;
        Ok(ModelOutput {
            encoders: outs,
            embedding,
            logits,
        })
    }

    /// Softmax class probabilities, `[N x n_classes]` row-major.
    pub fn predict_proba(&self, batch: &[Vec<&Spectrogram>]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let vars = self.params.attach(&mut g);
        let inputs = self.batch_inputs(&mut g, batch)?;
        let out = self.forward(&mut g, &vars, &inputs)?;
        Ok(softmax_rows(g.value(out.logits)))
    }

    /// One `[N, 1, frames, bins]` input per encoder. `batch[i][e]` is the
    /// spectrogram of sample `i` for encoder `e`.
    pub fn batch_inputs(&self, g: &mut Graph, batch: &[Vec<&Spectrogram>]) -> Result<Vec<Var>> {
        (0..self.encoders.len())
            .map(|e| {
                let specs: Vec<&Spectrogram> = batch.iter().map(|s| s[e]).collect();
                Ok(g.input(batch_tensor(&specs, self.encoders[e].kind)?))
            })
            .collect()
    }
}

/// Stack same-shaped spectrograms into `[N, 1, frames, bins]`.
pub fn batch_tensor(specs: &[&Spectrogram], kind: FeatureKind) -> Result<Tensor> {
    let Some(first) = specs.first() else {
        return Err(ModelError::InvalidConfig("empty batch".into()));
    };
    let (f, b) = first.shape();
    let mut data = Vec::with_capacity(specs.len() * f * b);
    for s in specs {
        if s.shape() != (f, b) || s.kind != kind {
            return Err(ModelError::InputShape {
                kind,
                expected: format!("{kind} ({f}, {b})"),
                actual: format!("{} {:?}", s.kind, s.shape()),
            });
        }
        data.extend_from_slice(&s.values);
    }
    Ok(Tensor::new(vec![specs.len(), 1, f, b], data)?)
}

pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: FeatureKind) -> EncoderConfig {
        EncoderConfig {
            kind,
            stem_channels: 3,
            blocks_per_stage: 1,
            widths: vec![4, 6],
            embedding_dim: 6,
            input_shape: None,
        }
    }

    fn spec(kind: FeatureKind, f: usize, b: usize, seed: u64) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Spectrogram {
            kind,
            n_frames: f,
            n_bins: b,
            values: (0..f * b).map(|_| rng.random_range(-1.0..1.0)).collect(),
            frame_times: vec![],
            bin_freqs: vec![],
        }
    }

    #[test]
    fn embedding_is_spatial_mean_of_maps() {
        let m = Model::new(vec![tiny(FeatureKind::Mel)], 3, 1).unwrap();
        let s: Vec<Spectrogram> = (0..4).map(|i| spec(FeatureKind::Mel, 17, 12, i)).collect();
        let batch: Vec<Vec<&Spectrogram>> = s.iter().map(|x| vec![x]).collect();
        let mut g = Graph::new();
        let vars = m.params.attach(&mut g);
        let inputs = m.batch_inputs(&mut g, &batch).unwrap();
        let out = m.forward(&mut g, &vars, &inputs).unwrap();
        let e = &out.encoders[0];
        let maps = g.value(e.feature_maps);
        let emb = g.value(e.embedding);
        let [n, c, h, w] = maps.shape()[..] else { panic!() };
        assert_eq!(emb.shape(), &[4, 6]);
        assert_eq!((n, c), (4, 6));
        for i in 0..n * c {
            let plane = &maps.data()[i * h * w..(i + 1) * h * w];
            let mean = plane.iter().sum::<f64>() / (h * w) as f64;
            assert_eq!(mean, emb.data()[i]);
        }
    }

    #[test]
    fn zero_input_gives_zero_embedding() {
        let m = Model::new(vec![tiny(FeatureKind::Cqt)], 2, 5).unwrap();
        let mut s = spec(FeatureKind::Cqt, 8, 8, 0);
        s.values.iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::new();
        let vars = m.params.attach(&mut g);
        let x = m.batch_inputs(&mut g, &[vec![&s]]).unwrap();
        let out = m.forward(&mut g, &vars, &x).unwrap();
        assert!(g.value(out.encoders[0].embedding).data().iter().all(|&v| v == 0.0));
        // zero embedding leaves only the (zero-initialized) bias
        assert!(g.value(out.logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classify_is_affine() {
        let m = Model::new(vec![tiny(FeatureKind::Mel)], 3, 2).unwrap();
        let mut params = m.params.clone();
        params.insert(HEAD_B, Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let mut g = Graph::new();
        let vars = params.attach(&mut g);
        let e1 = g.input(Tensor::new(vec![1, 6], vec![0.1, 0.2, -0.3, 0.4, 0.0, 1.0]).unwrap());
        let e2 = g.input(Tensor::new(vec![1, 6], vec![1.0, -0.5, 0.25, 0.0, 2.0, -1.0]).unwrap());
        let sum = g.add(e1, e2).unwrap();
        let l12 = classify(&mut g, &vars, sum).unwrap();
        let l1 = classify(&mut g, &vars, e1).unwrap();
        let l2 = classify(&mut g, &vars, e2).unwrap();
        let b = [0.5, -1.0, 2.0];
        for k in 0..3 {
            let lhs = g.value(l12).data()[k];
            let rhs = g.value(l1).data()[k] + g.value(l2).data()[k] - b[k];
            assert!((lhs - rhs).abs() < 1e-12);
        }
        let zero = g.input(Tensor::zeros(&[1, 6]));
        let lz = classify(&mut g, &vars, zero).unwrap();
        assert_eq!(g.value(lz).data(), &b);
    }

    #[test]
    fn permuting_head_rows_permutes_logits() {
        let m = Model::new(vec![tiny(FeatureKind::Mel)], 3, 4).unwrap();
        let w = m.params.get(HEAD_W).unwrap().data().to_vec();
        let perm = [2, 0, 1];
        let mut pw = vec![0.0; w.len()];
        for (i, &p) in perm.iter().enumerate() {
            pw[i * 6..(i + 1) * 6].copy_from_slice(&w[p * 6..(p + 1) * 6]);
        }
        let mut params = m.params.clone();
        params.insert(HEAD_W, Tensor::new(vec![3, 6], pw).unwrap());
        let e = Tensor::new(vec![1, 6], vec![0.3, -0.2, 0.9, 0.1, -0.7, 0.5]).unwrap();
        let run = |p: &ParamStore| {
            let mut g = Graph::new();
            let vars = p.attach(&mut g);
            let x = g.input(e.clone());
            let l = classify(&mut g, &vars, x).unwrap();
            g.value(l).data().to_vec()
        };
        let (a, b) = (run(&m.params), run(&params));
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(b[i], a[p]);
        }
    }

    #[test]
    fn encoders_share_no_parameters() {
        let m = Model::new(vec![EncoderConfig::desk(FeatureKind::Mel), EncoderConfig::desk(FeatureKind::Cqt)], 4, 0)
            .unwrap();
        let mel: Vec<_> = m.params.names().filter(|n| n.starts_with("mel.")).collect();
        let cqt: Vec<_> = m.params.names().filter(|n| n.starts_with("cqt.")).collect();
        assert!(!mel.is_empty() && mel.len() == cqt.len());
        assert_eq!(mel.len() + cqt.len() + 2, m.params.len());
        assert!(Model::new(vec![tiny(FeatureKind::Mel), tiny(FeatureKind::Mel)], 2, 0).is_err());
    }

    #[test]
    fn batch_of_n_gives_n_by_d() {
        let cfg = EncoderConfig::desk(FeatureKind::Mel);
        let m = Model::new(vec![cfg], 4, 3).unwrap();
        let s: Vec<Spectrogram> = (0..3).map(|i| spec(FeatureKind::Mel, 119, 40, i)).collect();
        let batch: Vec<Vec<&Spectrogram>> = s.iter().map(|x| vec![x]).collect();
        let mut g = Graph::new();
        let vars = m.params.attach(&mut g);
        let x = m.batch_inputs(&mut g, &batch).unwrap();
        let out = m.forward(&mut g, &vars, &x).unwrap();
        assert_eq!(g.shape(out.encoders[0].embedding), &[3, 64]);
        assert_eq!(g.shape(out.logits), &[3, 4]);
    }

    #[test]
    fn shape_bounds_are_enforced() {
        let mut cfg = tiny(FeatureKind::Mel);
        cfg.input_shape = Some((10, 9));
        let m = Model::new(vec![cfg], 2, 0).unwrap();
        let s = spec(FeatureKind::Mel, 10, 8, 0);
        let mut g = Graph::new();
        let vars = m.params.attach(&mut g);
        let x = m.batch_inputs(&mut g, &[vec![&s]]).unwrap();
        assert!(matches!(m.forward(&mut g, &vars, &x), Err(ModelError::InputShape { .. })));
        let bad = EncoderConfig {
            embedding_dim: 5,
            ..tiny(FeatureKind::Mel)
        };
        assert!(bad.validate().is_err());
    }
}
