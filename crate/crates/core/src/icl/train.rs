use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, combined_loss, cosine_similarity_matrix, IclError, LossBreakdown, Result, DEFAULT_ALPHA};
use crate::autodiff::{AdamW, AutodiffError, Graph, ParamStore, Tensor};
use crate::features::{FeatureKind, Spectrogram};
use crate::model::{Model, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Two encoders, summed embeddings, classification plus contrastive loss.
    Icl,
    /// One encoder, classification loss only.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Encoder inputs in order; the first one supplies the similarity rows.
    pub features: Vec<FeatureKind>,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    /// Average row- and column-wise contrastive losses.
    pub symmetric: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Icl,
            features: vec![FeatureKind::Mel, FeatureKind::Cqt],
            lr: 5e-4,
            weight_decay: 1e-5,
            epochs: 200,
            batch_size: 32,
            alpha: DEFAULT_ALPHA,
            symmetric: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(IclError::InvalidArgument { op: "train", reason });
        match (self.mode, self.features.len()) {
            (TrainMode::Single, 1) | (TrainMode::Icl, 2) => {}
            // one-feature contrastive training at alpha 0 is the single-feature baseline
            (TrainMode::Icl, 1) if self.alpha == 0.0 => {}
            (mode, n) => return bad(format!("{mode:?} mode with {n} features")),
        }
        if self.features.len() == 2 && self.features[0] == self.features[1] {
            return bad("the two encoders need different features".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad(format!("invalid lr {} / weight_decay {}", self.lr, self.weight_decay));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        let min_batch = if self.contrastive() { 2 } else { 1 };
        if self.batch_size < min_batch {
            return bad(format!("batch_size must be >= {min_batch}, got {}", self.batch_size));
        }
        Ok(())
    }

    pub fn contrastive(&self) -> bool {
        self.features.len() == 2
    }
}

/// Features of one segment, in `TrainConfig::features` order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub features: Vec<Spectrogram>,
    pub label: usize,
}

impl LabeledSample {
    pub fn inputs(&self) -> Vec<&Spectrogram> {
        self.features.iter().collect()
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub icl: f64,
    pub total: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters are kept.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub model: Model,
}

/// Train `model` in place of its initial parameters. Each epoch shuffles the
/// training set with a generator seeded from `seed`, steps once per batch
/// (the final short batch included) and scores the validation set. The
/// returned model holds the parameters of the first best validation epoch.
pub fn train(
    cfg: &TrainConfig,
    mut model: Model,
    train_set: &[LabeledSample],
    val_set: &[LabeledSample],
    seed: u64,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainRun> {
    cfg.validate()?;
    if model.kinds() != cfg.features {
        return Err(IclError::InvalidArgument {
            op: "train",
            reason: format!("model encoders {:?} do not match features {:?}", model.kinds(), cfg.features),
        });
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(IclError::InvalidArgument {
            op: "train",
            reason: "training and validation sets must be nonempty".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&LabeledSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let loss = step(cfg, &mut model, &mut opt, &batch, epoch, bi + 1)?;
            let w = batch.len() as f64;
            sums[0] += w * loss.ce;
            sums[1] += w * loss.icl;
            sums[2] += w * loss.total;
        }
        let n = train_set.len() as f64;
        let val_accuracy = evaluate_accuracy(&model, val_set, cfg.batch_size)?;
        let rec = EpochRecord {
            epoch,
            ce: sums[0] / n,
            icl: sums[1] / n,
            total: sums[2] / n,
            val_accuracy,
        };
        log::info!(
            "epoch {epoch}: ce {:.4} icl {:.4} total {:.4} val {:.4}",
            rec.ce,
            rec.icl,
            rec.total,
            val_accuracy
        );
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(&rec).expect("epoch record serializes");
            writeln!(w, "{line}").map_err(|source| IclError::Io {
                path: "metrics log".into(),
                source,
            })?;
        }
        if best.as_ref().is_none_or(|(_, acc, _)| val_accuracy > *acc) {
            best = Some((epoch, val_accuracy, model.params.clone()));
        }
        history.push(rec);
    }
    let (best_epoch, best_val_accuracy, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(TrainRun {
        config: cfg.clone(),
        history,
        best_epoch,
        best_val_accuracy,
        model,
    })
}

fn step(
    cfg: &TrainConfig,
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[&LabeledSample],
    epoch: usize,
    batch_index: usize,
) -> Result<LossBreakdown> {
    let tag = |component: &'static str| {
        move |e: IclError| match e {
            IclError::Autodiff(AutodiffError::NonFinite { .. })
            | IclError::Model(ModelError::Autodiff(AutodiffError::NonFinite { .. })) => IclError::NonFiniteLoss {
                epoch,
                batch: batch_index,
                component,
            },
            other => other,
        }
    };
    let mut g = Graph::new();
    let vars = model.params.attach(&mut g);
    let specs: Vec<Vec<&Spectrogram>> = batch.iter().map(|s| s.inputs()).collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let inputs = model.batch_inputs(&mut g, &specs)?;
    let out = model.forward(&mut g, &vars, &inputs).map_err(IclError::from).map_err(tag("forward"))?;
    let m = if cfg.contrastive() && batch.len() >= 2 {
        let (e1, e2) = (out.encoders[0].embedding, out.encoders[1].embedding);
        Some(cosine_similarity_matrix(&mut g, e1, e2).map_err(tag("icl"))?)
    } else {
        None
    };
    let terms = combined_loss(&mut g, out.logits, &labels, m, cfg.alpha, cfg.symmetric).map_err(tag("total"))?;
    let loss = terms.breakdown(&g, cfg.alpha);
    for (component, v) in [("ce", loss.ce), ("icl", loss.icl), ("total", loss.total)] {
        if !v.is_finite() {
            return Err(IclError::NonFiniteLoss {
                epoch,
                batch: batch_index,
                component,
            });
        }
    }
    let mut grads = g.backward(terms.total).map_err(IclError::from).map_err(tag("gradient"))?;
    let named: BTreeMap<String, Tensor> = vars
        .iter()
        .map(|(name, &v)| {
            grads
                .take(v)
                .map(|t| (name.clone(), t))
                .ok_or_else(|| AutodiffError::MissingGradient(name.clone()))
        })
        .collect::<std::result::Result<_, _>>()?;
    opt.step(&mut model.params, &named)?;
    Ok(loss)
}

/// Class probabilities for every sample, computed `batch_size` at a time.
pub fn predict_batched(model: &Model, samples: &[LabeledSample], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let specs: Vec<Vec<&Spectrogram>> = chunk.iter().map(|s| s.inputs()).collect();
        out.extend(model.predict_proba(&specs)?);
    }
    Ok(out)
}

pub fn evaluate_accuracy(model: &Model, samples: &[LabeledSample], batch_size: usize) -> Result<f64> {
    let probs = predict_batched(model, samples, batch_size)?;
    let correct = probs.iter().zip(samples).filter(|(p, s)| argmax(p) == s.label).count();
    Ok(correct as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::model::EncoderConfig;
    use rand::Rng;

    fn tiny(kind: FeatureKind) -> EncoderConfig {
        EncoderConfig {
            kind,
            stem_channels: 2,
            blocks_per_stage: 1,
            widths: vec![3, 4],
            embedding_dim: 4,
            input_shape: None,
        }
    }

    fn spec(kind: FeatureKind, frames: usize, bins: usize, rng: &mut ChaCha8Rng, shift: f64) -> Spectrogram {
        Spectrogram {
            kind,
            n_frames: frames,
            n_bins: bins,
            values: (0..frames * bins).map(|_| rng.random_range(-1.0..1.0) + shift).collect(),
            frame_times: (0..frames).map(|i| i as f64).collect(),
            bin_freqs: (0..bins).map(|i| i as f64).collect(),
        }
    }

    fn toy_set(n: usize, kinds: &[FeatureKind], seed: u64) -> Vec<LabeledSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                LabeledSample {
                    id: format!("s{i}"),
                    features: kinds.iter().map(|&k| spec(k, 8, 8, &mut rng, label as f64)).collect(),
                    label,
                }
            })
            .collect()
    }

    fn cfg(features: Vec<FeatureKind>, alpha: f64) -> TrainConfig {
        TrainConfig {
            mode: if features.len() == 2 { TrainMode::Icl } else { TrainMode::Single },
            features,
            epochs: 3,
            batch_size: 4,
            alpha,
            lr: 1e-2,
            ..TrainConfig::default()
        }
    }

    fn run(c: &TrainConfig, seed: u64) -> (TrainRun, String) {
        let encoders = c.features.iter().map(|&k| tiny(k)).collect();
        let model = Model::new(encoders, 2, seed).unwrap();
        let tr = toy_set(10, &c.features, 1);
        let va = toy_set(4, &c.features, 2);
        let mut buf = Vec::new();
        let r = train(c, model, &tr, &va, seed, Some(&mut buf)).unwrap();
        (r, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn training_is_deterministic() {
        let c = cfg(vec![FeatureKind::Mel, FeatureKind::Cqt], 0.5);
        let (a, la) = run(&c, 7);
        let (b, lb) = run(&c, 7);
        assert_eq!(la, lb);
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.history.len(), 3);
        assert_eq!(la.lines().count(), 3);
        let rec: EpochRecord = serde_json::from_str(la.lines().next().unwrap()).unwrap();
        assert_eq!(rec.epoch, 1);
        assert!(rec.icl > 0.0);
    }

    #[test]
    fn best_epoch_is_first_maximum() {
        let c = cfg(vec![FeatureKind::Mel, FeatureKind::Cqt], 0.5);
        let (r, _) = run(&c, 3);
        let max = r.history.iter().map(|h| h.val_accuracy).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.best_val_accuracy, max);
        let first = r.history.iter().position(|h| h.val_accuracy == max).unwrap();
        assert_eq!(r.best_epoch, first + 1);
    }

    #[test]
    fn single_feature_icl_at_zero_alpha_is_the_baseline() {
        let single = cfg(vec![FeatureKind::Mel], 0.0);
        let mut icl = single.clone();
        icl.mode = TrainMode::Icl;
        let (a, la) = run(&single, 5);
        let (b, lb) = run(&icl, 5);
        assert_eq!(la, lb);
        assert_eq!(a.model.params, b.model.params);
        icl.alpha = 0.5;
        assert!(icl.validate().is_err());
    }

    #[test]
    fn zero_alpha_total_is_ce_each_epoch() {
        let (r, _) = run(&cfg(vec![FeatureKind::Mel, FeatureKind::Cqt], 0.0), 2);
        for h in &r.history {
            assert_eq!(h.total, h.ce);
            assert!(h.icl > 0.0);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = cfg(vec![FeatureKind::Mel, FeatureKind::Cqt], 0.5);
        c.batch_size = 1;
        assert!(c.validate().is_err());
        let c = cfg(vec![FeatureKind::Mel, FeatureKind::Mel], 0.5);
        assert!(c.validate().is_err());
        let mut c = cfg(vec![FeatureKind::Mel, FeatureKind::Cqt], 0.5);
        c.alpha = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn non_finite_input_reports_epoch_and_batch() {
        let c = cfg(vec![FeatureKind::Mel], 0.0);
        let model = Model::new(vec![tiny(FeatureKind::Mel)], 2, 0).unwrap();
        let mut tr = toy_set(6, &c.features, 1);
        let va = toy_set(2, &c.features, 2);
        for s in tr.iter_mut() {
            s.features[0].values[0] = f64::NAN;
        }
        let err = train(&c, model, &tr, &va, 0, None).unwrap_err();
        assert!(matches!(err, IclError::NonFiniteLoss { epoch: 1, batch: 1, .. }), "{err}");
    }

    #[test]
    fn full_two_encoder_objective_passes_grad_check() {
        let encoders = vec![tiny(FeatureKind::Mel), tiny(FeatureKind::Cqt)];
        let model = Model::new(encoders, 3, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch: Vec<(Spectrogram, Spectrogram)> = (0..3)
            .map(|_| (spec(FeatureKind::Mel, 8, 8, &mut rng, 0.0), spec(FeatureKind::Cqt, 8, 8, &mut rng, 0.0)))
            .collect();
        let labels = [0, 2, 1];
        let names: Vec<String> = model.params.names().cloned().collect();
        let point: Vec<Tensor> = names.iter().map(|n| model.params.get(n).unwrap().clone()).collect();
        let report = grad_check(
            |g, v| {
                let vars: BTreeMap<String, _> = names.iter().cloned().zip(v.iter().copied()).collect();
                let specs: Vec<Vec<&Spectrogram>> = batch.iter().map(|(a, b)| vec![a, b]).collect();
                let lift = |e: ModelError| match e {
                    ModelError::Autodiff(a) => a,
                    other => panic!("{other}"),
                };
                let inputs = model.batch_inputs(g, &specs).map_err(lift)?;
                let out = model.forward(g, &vars, &inputs).map_err(lift)?;
                let unwrap = |e: IclError| match e {
                    IclError::Autodiff(a) => a,
                    other => panic!("{other}"),
                };
                let m = cosine_similarity_matrix(g, out.encoders[0].embedding, out.encoders[1].embedding)
                    .map_err(unwrap)?;
                Ok(combined_loss(g, out.logits, &labels, Some(m), 0.5, false).map_err(unwrap)?.total)
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert!(report.checked > report.skipped);
    }
}
