use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, ConfusionMatrix, EvalError, Result};
use crate::export;

/// Per-run evaluation record, stored as `runs/<name>/summary/eval.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    /// Display name of the method row, e.g. `"Mel"` or `"ICL"`.
    pub method: String,
    pub features: Vec<String>,
    pub seed: u64,
    pub alpha: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
    pub n_test: usize,
    pub confusion: ConfusionMatrix,
    /// Runs whose checkpoints this one depends on (the ensemble members).
    #[serde(default)]
    pub members: Vec<String>,
}

impl RunSummary {
    pub fn path(run_root: &Path, name: &str) -> PathBuf {
        run_root.join("runs").join(name).join("summary").join("eval.json")
    }

    pub fn checkpoint_path(run_root: &Path, name: &str) -> PathBuf {
        run_root.join("runs").join(name).join("checkpoint.iclc")
    }

    pub fn write(&self, run_root: &Path) -> Result<()> {
        let path = Self::path(run_root, &self.name);
        export::create_parent(&path).map_err(io_err(&path))?;
        let text = serde_json::to_string_pretty(self).expect("summary serializes") + "\n";
        fs::write(&path, text).map_err(io_err(&path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| EvalError::BadSummary {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}

/// Canonical row order of the results table (run directory names).
pub const METHODS: [&str; 5] = ["stft", "mel", "cqt", "ensemble", "icl"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub method: String,
    pub features: String,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

/// Collect every `runs/*/summary/eval.json` under `run_root` and write
/// `report/results.{csv,json}` plus per-run confusion matrices. Rows follow
/// [`METHODS`] first, then any other runs by name.
pub fn export_report(run_root: &Path) -> Result<Vec<ReportRow>> {
    let runs_dir = run_root.join("runs");
    let mut names: Vec<String> = match fs::read_dir(&runs_dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| RunSummary::path(run_root, n).exists())
            .collect(),
        Err(_) => Vec::new(),
    };
    if names.is_empty() {
        return Err(EvalError::InvalidInput(format!("no evaluated runs under {}", runs_dir.display())));
    }
    names.sort_by_key(|n| (METHODS.iter().position(|m| m == n).unwrap_or(METHODS.len()), n.clone()));

    let report = run_root.join("report");
    let mut rows = Vec::new();
    for name in &names {
        let s = RunSummary::read(&RunSummary::path(run_root, name))?;
        let needed = if s.members.is_empty() {
            vec![name.clone()]
        } else {
            s.members.clone()
        };
        for m in needed {
            let ck = RunSummary::checkpoint_path(run_root, &m);
            if !ck.exists() {
                return Err(EvalError::MissingCheckpoint(ck.display().to_string()));
            }
        }
        s.confusion.write_csv(report.join("confusion").join(format!("{name}.csv")))?;
        s.confusion.write_pgm(report.join("confusion").join(format!("{name}.pgm")), 32)?;
        rows.push(ReportRow {
            run: name.clone(),
            method: s.method.clone(),
            features: s.features.join("+"),
            val_accuracy: s.best_val_accuracy,
            test_accuracy: s.test_accuracy,
        });
    }

    let csv: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.run.clone(),
                r.method.clone(),
                r.features.clone(),
                format!("{}", r.val_accuracy),
                format!("{}", r.test_accuracy),
            ]
        })
        .collect();
    let csv_path = report.join("results.csv");
    export::write_csv(&csv_path, Some(&["run", "method", "features", "val_accuracy", "test_accuracy"]), &csv)
        .map_err(io_err(&csv_path))?;
    let json_path = report.join("results.json");
    let text = serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n";
    fs::write(&json_path, text).map_err(io_err(&json_path))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::confusion;

    fn summary(name: &str, method: &str, acc: f64, members: Vec<String>) -> RunSummary {
        let names: Vec<String> = vec!["a".into(), "b".into()];
        RunSummary {
            name: name.into(),
            method: method.into(),
            features: vec!["mel".into()],
            seed: 0,
            alpha: None,
            best_epoch: Some(1),
            best_val_accuracy: acc,
            test_accuracy: acc,
            n_test: 2,
            confusion: confusion(&[0, 1], &[0, 1], &names).unwrap(),
            members,
        }
    }

    #[test]
    fn rows_follow_method_order_and_require_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for (name, method) in [("icl", "ICL"), ("mel", "Mel"), ("cqt", "CQT")] {
            summary(name, method, 0.5, vec![]).write(root).unwrap();
            fs::write(RunSummary::checkpoint_path(root, name), b"x").unwrap();
        }
        summary("ensemble", "Ensemble", 0.75, vec!["mel".into(), "cqt".into()])
            .write(root)
            .unwrap();
        let rows = export_report(root).unwrap();
        let order: Vec<&str> = rows.iter().map(|r| r.run.as_str()).collect();
        assert_eq!(order, ["mel", "cqt", "ensemble", "icl"]);
        let first = fs::read(root.join("report/results.csv")).unwrap();
        export_report(root).unwrap();
        assert_eq!(fs::read(root.join("report/results.csv")).unwrap(), first);
        assert!(root.join("report/confusion/icl.pgm").exists());

        fs::remove_file(RunSummary::checkpoint_path(root, "cqt")).unwrap();
        assert!(matches!(export_report(root), Err(EvalError::MissingCheckpoint(_))));
    }
}
