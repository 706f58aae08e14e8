//! Contrastive objective between paired Mel/CQT embeddings, the training
//! loop shared by contrastive and single-feature runs, and the
//! decision-level ensemble.

mod train;

pub use train::{
    evaluate_accuracy, predict_batched, train, EpochRecord, LabeledSample, TrainConfig, TrainMode, TrainRun,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum IclError {
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("non-finite {component} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        component: &'static str,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, IclError>;

pub const DEFAULT_ALPHA: f64 = 0.5;

/// `M[i, j] = <E1_i, E2_j> / (|E1_i| |E2_j|)`, rows from `e1`, columns from `e2`.
pub fn cosine_similarity_matrix(g: &mut Graph, e1: Var, e2: Var) -> Result<Var> {
    let (s1, s2) = (g.shape(e1).to_vec(), g.shape(e2).to_vec());
    if s1.len() != 2 || s1 != s2 {
        return Err(AutodiffError::ShapeMismatch {
            op: "cosine_similarity_matrix",
            left: s1,
            right: s2,
        }
        .into());
    }
    if s1[0] < 2 || s1[1] < 1 {
        return Err(IclError::InvalidArgument {
            op: "cosine_similarity_matrix",
            reason: format!("need N >= 2 and D >= 1, got {:?}", s1),
        });
    }
    let n1 = g.l2_normalize_rows(e1)?;
    let n2 = g.l2_normalize_rows(e2)?;
    let t = g.transpose(n2)?;
    Ok(g.matmul(n1, t)?)
}

/// Cross-entropy of the similarity matrix against the identity: row `i`
/// targets column `i`. `symmetric` averages the row and column directions.
pub fn icl_loss(g: &mut Graph, m: Var, symmetric: bool) -> Result<Var> {
    let shape = g.shape(m).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(IclError::InvalidArgument {
            op: "icl_loss",
            reason: format!("similarity matrix must be square, got {shape:?}"),
        });
    }
    let targets: Vec<usize> = (0..shape[0]).collect();
    let rows = g.softmax_cross_entropy(m, &targets)?;
    if !symmetric {
        return Ok(rows);
    }
    let mt = g.transpose(m)?;
    let cols = g.softmax_cross_entropy(mt, &targets)?;
    Ok(g.weighted_sum(&[(rows, 0.5), (cols, 0.5)])?)
}

/// Loss component values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub icl: f64,
    pub alpha: f64,
    pub total: f64,
}

/// Graph nodes of the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub ce: Var,
    pub icl: Option<Var>,
    pub total: Var,
}

impl LossTerms {
    pub fn breakdown(&self, g: &Graph, alpha: f64) -> LossBreakdown {
        LossBreakdown {
            ce: g.value(self.ce).item(),
            icl: self.icl.map_or(0.0, |v| g.value(v).item()),
            alpha,
            total: g.value(self.total).item(),
        }
    }
}

/// `total = CE(logits, y) + alpha * icl_loss(M)`; without `m` the total is the
/// classification loss alone.
pub fn combined_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    m: Option<Var>,
    alpha: f64,
    symmetric: bool,
) -> Result<LossTerms> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(IclError::InvalidArgument {
            op: "combined_loss",
            reason: format!("alpha must be finite and >= 0, got {alpha}"),
        });
    }
    let ce = g.softmax_cross_entropy(logits, labels)?;
    let Some(m) = m else {
        return Ok(LossTerms { ce, icl: None, total: ce });
    };
    let icl = icl_loss(g, m, symmetric)?;
    let total = g.weighted_sum(&[(ce, 1.0), (icl, alpha)])?;
    Ok(LossTerms {
        ce,
        icl: Some(icl),
        total,
    })
}

const PROB_SUM_TOL: f64 = 1e-6;

/// Index of the first maximum.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Agreed class, otherwise the prediction of the more confident model;
/// an exact confidence tie goes to `a` (the Mel model).
pub fn ensemble_predict(a: &[f64], b: &[f64]) -> Result<usize> {
    for (name, p) in [("probs_a", a), ("probs_b", b)] {
        let sum: f64 = p.iter().sum();
        if p.is_empty() || p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(IclError::InvalidArgument {
                op: "ensemble_predict",
                reason: format!("{name} is not a probability vector (sum {sum})"),
            });
        }
    }
    if a.len() != b.len() {
        return Err(IclError::InvalidArgument {
            op: "ensemble_predict",
            reason: format!("{} vs {} classes", a.len(), b.len()),
        });
    }
    let (ia, ib) = (argmax(a), argmax(b));
    if ia == ib || a[ia] >= b[ib] {
        Ok(ia)
    } else {
        Ok(ib)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 2], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(shape.to_vec(), (0..shape[0] * shape[1]).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn loss_of(m: Tensor, symmetric: bool) -> f64 {
        let mut g = Graph::new();
        let v = g.input(m);
        let l = icl_loss(&mut g, v, symmetric).unwrap();
        g.value(l).item()
    }

    fn sim(e1: Tensor, e2: Tensor) -> Vec<f64> {
        let mut g = Graph::new();
        let (a, b) = (g.input(e1), g.input(e2));
        let m = cosine_similarity_matrix(&mut g, a, b).unwrap();
        g.value(m).data().to_vec()
    }

    #[test]
    fn zero_matrix_gives_log_n() {
        let l = loss_of(Tensor::zeros(&[32, 32]), false);
        assert!((l - 32f64.ln()).abs() < 1e-12);
        let l = loss_of(Tensor::zeros(&[32, 32]), true);
        assert!((l - 32f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn similarity_matches_double_loop() {
        let (e1, e2) = (random([3, 4], 1), random([3, 4], 2));
        let m = sim(e1.clone(), e2.clone());
        let (a, b) = (e1.data(), e2.data());
        for i in 0..3 {
            for j in 0..3 {
                let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
                for k in 0..4 {
                    dot += a[i * 4 + k] * b[j * 4 + k];
                    na += a[i * 4 + k] * a[i * 4 + k];
                    nb += b[j * 4 + k] * b[j * 4 + k];
                }
                assert!((m[i * 3 + j] - dot / (na.sqrt() * nb.sqrt())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn orthonormal_rows_give_identity_and_scaling_is_invisible() {
        let eye = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(sim(eye.clone(), eye.clone()), eye.data());
        let e = random([5, 7], 3);
        let scaled = Tensor::new(vec![5, 7], e.data().iter().map(|v| v * 3.7).collect()).unwrap();
        let m = sim(scaled, e.clone());
        for i in 0..5 {
            assert!((m[i * 5 + i] - 1.0).abs() < 1e-12);
        }
        let base = sim(e.clone(), random([5, 7], 4));
        let scaled = Tensor::new(vec![5, 7], e.data().iter().map(|v| v * 0.01).collect()).unwrap();
        for (x, y) in base.iter().zip(sim(scaled, random([5, 7], 4))) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn scaled_identity_loss_decreases() {
        let mut prev = f64::INFINITY;
        for k in 0..=4 {
            let s = k as f64 * 0.25;
            let mut m = Tensor::zeros(&[8, 8]);
            for i in 0..8 {
                m.data_mut()[i * 8 + i] = s;
            }
            let l = loss_of(m, false);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn non_square_and_mismatched_inputs_are_rejected() {
        let mut g = Graph::new();
        let m = g.input(Tensor::zeros(&[3, 4]));
        assert!(icl_loss(&mut g, m, false).is_err());
        let a = g.input(Tensor::zeros(&[3, 4]));
        let b = g.input(Tensor::zeros(&[3, 5]));
        assert!(cosine_similarity_matrix(&mut g, a, b).is_err());
        let one = g.input(Tensor::filled(&[1, 4], 1.0));
        assert!(cosine_similarity_matrix(&mut g, one, one).is_err());
    }

    fn breakdown(alpha: f64) -> LossBreakdown {
        let mut g = Graph::new();
        let logits = g.input(random([4, 3], 5));
        let m = g.input(random([4, 4], 6));
        let t = combined_loss(&mut g, logits, &[0, 2, 1, 1], Some(m), alpha, false).unwrap();
        t.breakdown(&g, alpha)
    }

    #[test]
    fn alpha_linearity() {
        let zero = breakdown(0.0);
        assert_eq!(zero.total, zero.ce);
        let (a, b) = (breakdown(0.5), breakdown(1.0));
        assert_eq!(b.total - b.ce, 2.0 * (a.total - a.ce));
        assert!(a.ce > 0.0 && a.icl > 0.0);
        let mut g = Graph::new();
        let logits = g.input(random([2, 3], 7));
        assert!(combined_loss(&mut g, logits, &[0, 3], None, 0.5, false).is_err());
        assert!(combined_loss(&mut g, logits, &[0, 1], None, -0.1, false).is_err());
    }

    #[test]
    fn icl_gradient_matches_finite_differences() {
        for symmetric in [false, true] {
            let report = grad_check(
                |g, v| {
                    let m = cosine_similarity_matrix(g, v[0], v[1]).map_err(|e| match e {
                        IclError::Autodiff(a) => a,
                        other => panic!("{other}"),
                    })?;
                    icl_loss(g, m, symmetric).map_err(|e| match e {
                        IclError::Autodiff(a) => a,
                        other => panic!("{other}"),
                    })
                },
                &[random([4, 5], 8), random([4, 5], 9)],
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{report:?}");
        }
    }

    #[test]
    fn ensemble_examples() {
        assert_eq!(ensemble_predict(&[0.7, 0.3], &[0.6, 0.4]).unwrap(), 0);
        assert_eq!(ensemble_predict(&[0.55, 0.45], &[0.1, 0.9]).unwrap(), 1);
        assert_eq!(ensemble_predict(&[0.6, 0.4], &[0.4, 0.6]).unwrap(), 0);
        assert!(ensemble_predict(&[0.6, 0.6], &[0.5, 0.5]).is_err());
        assert!(ensemble_predict(&[0.5, 0.5], &[0.2, 0.3, 0.5]).is_err());
    }
}
