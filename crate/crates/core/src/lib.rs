//! Interpretable contrastive learning for underwater acoustic target
//! recognition: Mel and CQT front-ends, two residual encoders tied by a
//! cosine-similarity contrastive term, baselines, CAM explanations and
//! evaluation.

pub mod autodiff;
pub mod config;
pub mod eval;
pub mod export;
pub mod features;
pub mod icl;
pub mod model;
pub mod pipeline;
pub mod signal;
