//! Accuracy, confusion matrices and the report/figure exports.

mod report;

pub use report::{export_report, ReportRow, RunSummary, METHODS};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::export;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    InvalidInput(String),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(String),
    #[error("{path}: {reason}")]
    BadSummary { path: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Fraction of equal pairs.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(EvalError::InvalidInput(format!(
            "need equal nonempty inputs, got {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Rows are true labels, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Each row divided by its sum; empty rows stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|r| {
                let s: u64 = r.iter().sum();
                r.iter().map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 }).collect()
            })
            .collect()
    }

    /// Header row of predicted class names, then one row per true class.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut header = vec!["true\\predicted"];
        header.extend(self.class_names.iter().map(String::as_str));
        let rows: Vec<Vec<String>> = self
            .counts
            .iter()
            .zip(&self.class_names)
            .map(|(r, name)| std::iter::once(name.clone()).chain(r.iter().map(u64::to_string)).collect())
            .collect();
        export::write_csv(path, Some(&header), &rows).map_err(io_err(path))
    }

    /// Row-normalized heat map, `cell` pixels per entry; 0 is white and a
    /// full row is black.
    pub fn write_pgm(&self, path: impl AsRef<Path>, cell: usize) -> Result<()> {
        let path = path.as_ref();
        let n = self.n_classes();
        let size = n * cell;
        let norm = self.row_normalized();
        let mut pixels = vec![0u8; size * size];
        for y in 0..size {
            for x in 0..size {
                pixels[y * size + x] = (255.0 * (1.0 - norm[y / cell][x / cell])).round() as u8;
            }
        }
        export::write_pgm(path, size, size, &pixels).map_err(io_err(path))
    }
}

pub fn confusion(predictions: &[usize], labels: &[usize], class_names: &[String]) -> Result<ConfusionMatrix> {
    let c = class_names.len();
    if predictions.len() != labels.len() {
        return Err(EvalError::InvalidInput(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut counts = vec![vec![0u64; c]; c];
    for (&p, &l) in predictions.iter().zip(labels) {
        for v in [p, l] {
            if v >= c {
                return Err(EvalError::LabelOutOfRange { label: v, n_classes: c });
            }
        }
        counts[l][p] += 1;
    }
    Ok(ConfusionMatrix {
        class_names: class_names.to_vec(),
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn confusion_shapes() {
        let perfect = confusion(&[0, 1, 2, 1], &[0, 1, 2, 1], &names(3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(perfect.counts[i][j] > 0, i == j);
            }
        }
        let constant = confusion(&[0, 0, 0, 0], &[0, 1, 2, 1], &names(3)).unwrap();
        assert!(constant.counts.iter().all(|r| r[1] == 0 && r[2] == 0));
        assert_eq!(constant.row_sums(), vec![1, 2, 1]);
        assert!(confusion(&[3], &[0], &names(3)).is_err());
        assert!(confusion(&[0], &[5], &names(3)).is_err());
    }

    #[test]
    fn heat_map_is_row_normalized() {
        let cm = confusion(&[0, 1, 1, 1], &[0, 0, 1, 1], &names(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cm.pgm");
        cm.write_pgm(&p, 2).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let px = &bytes[header.len()..];
        assert_eq!(px[0], 128); // row 0: half and half
        assert_eq!(px[2], 128);
        assert_eq!(px[2 * 4], 255); // row 1: nothing predicted as class 0
        assert_eq!(px[2 * 4 + 2], 0);
        cm.write_csv(dir.path().join("cm.csv")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("cm.csv")).unwrap();
        assert_eq!(csv, "true\\predicted,c0,c1\nc0,1,1\nc1,0,2\n");
    }

    proptest! {
        #[test]
        fn trace_over_total_is_accuracy(pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..60)) {
            let (p, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let cm = confusion(&p, &l, &names(5)).unwrap();
            prop_assert_eq!(cm.total() as usize, l.len());
            let correct = p.iter().zip(&l).filter(|(a, b)| a == b).count() as u64;
            prop_assert_eq!(cm.trace(), correct);
            prop_assert_eq!(cm.accuracy(), accuracy(&p, &l).unwrap());
        }
    }
}
