use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use icl_core::config::RunConfig;
use icl_core::eval::export_report;
use icl_core::features::FeatureKind;
use icl_core::icl::{TrainConfig, TrainMode};
use icl_core::pipeline::{
    baseline_config, extract_cached, feature_tables, load_method, prepare, run_method, with_jobs, write_cams, write_config,
    write_ensemble, write_method, write_synthetic_dataset, Prepared,
};

/// Contrastive Mel/CQT recognition of ship-radiated noise.
#[derive(Debug, Parser)]
#[command(name = "icl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic dataset (WAVs and manifest) to OUT/data.
    Synth(Common),
    /// Extract and cache features for every segment.
    Extract {
        #[command(flatten)]
        common: Common,
        /// Feature kinds to extract.
        #[arg(long, value_delimiter = ',', default_values = ["stft", "mel", "cqt"])]
        features: Vec<String>,
    },
    /// Train one method, or every method of the results table.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "config")]
        method: Method,
        /// Run directory name under OUT/runs (defaults to the method name).
        #[arg(long)]
        name: Option<String>,
    },
    /// Score the saved runs on the test split and build the ensemble.
    Eval(Common),
    /// Write class activation maps of test segments.
    Cam {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "icl")]
        run: String,
        /// Positions within the test split.
        #[arg(long, value_delimiter = ',', default_values = ["0"])]
        samples: Vec<usize>,
    },
    /// Write the results table and confusion matrices.
    Report(Common),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    /// Whatever `training` in the config describes.
    Config,
    Icl,
    Mel,
    Cqt,
    Stft,
    /// STFT, Mel and CQT baselines followed by the contrastive model.
    All,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Run directory; every output is written below it.
    #[arg(long, default_value = "icl-run")]
    out: PathBuf,
    /// JSON config (defaults to OUT/config.json when present).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a named preset instead of the defaults.
    #[arg(long)]
    preset: Option<String>,
    /// Override one config leaf, e.g. `--set training.alpha=0.2`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Cap on worker threads.
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    /// File or preset, then `ICL_SEED`, then `--set` and `--jobs`.
    fn config(&self) -> Result<RunConfig> {
        let existing = self.out.join("config.json");
        let mut cfg = match (&self.config, &self.preset) {
            (Some(_), Some(_)) => bail!("--config and --preset are mutually exclusive"),
            (Some(path), None) => RunConfig::load(path)?,
            (None, Some(name)) => RunConfig::preset(name)?,
            (None, None) if existing.exists() => RunConfig::load(&existing)?,
            (None, None) => RunConfig::default(),
        };
        if let Ok(seed) = std::env::var("ICL_SEED") {
            cfg.seed = seed
                .trim()
                .parse()
                .with_context(|| format!("ICL_SEED must be an unsigned integer, got `{seed}`"))?;
        }
        cfg.apply_overrides(self.overrides.iter().map(String::as_str))?;
        if let Some(j) = self.jobs {
            cfg.jobs = Some(j);
        }
        Ok(cfg)
    }

    /// Directory that relative dataset paths resolve against.
    fn base(&self) -> PathBuf {
        match &self.config {
            Some(p) => p.parent().map(Path::to_path_buf).unwrap_or_default(),
            None => PathBuf::from("."),
        }
    }

    fn prepare(&self) -> Result<Prepared> {
        let cfg = self.config()?;
        let p = prepare(&cfg, &self.base())?;
        write_config(&self.out, &p.config)?;
        Ok(p)
    }
}

fn parse_kind(s: &str) -> Result<FeatureKind> {
    s.parse().map_err(anyhow::Error::msg)
}

fn train_plan(t: &TrainConfig, method: Method) -> Vec<(String, TrainConfig)> {
    let icl = || TrainConfig {
        mode: TrainMode::Icl,
        features: vec![FeatureKind::Mel, FeatureKind::Cqt],
        ..t.clone()
    };
    let base = |k: FeatureKind| (k.name().to_string(), baseline_config(t, k));
    match method {
        Method::Config => {
            let name = if t.features.len() == 2 {
                "icl".to_string()
            } else {
                t.features[0].name().to_string()
            };
            vec![(name, t.clone())]
        }
        Method::Icl => vec![("icl".into(), icl())],
        Method::Mel => vec![base(FeatureKind::Mel)],
        Method::Cqt => vec![base(FeatureKind::Cqt)],
        Method::Stft => vec![base(FeatureKind::Stft)],
        Method::All => vec![
            base(FeatureKind::Stft),
            base(FeatureKind::Mel),
            base(FeatureKind::Cqt),
            ("icl".into(), icl()),
        ],
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(common) => {
            let mut cfg = common.config()?;
            let dir = common.out.join("data");
            let manifest = write_synthetic_dataset(&cfg, &dir)?;
            if let Some(sr) = cfg.synthesis_rate() {
                cfg.features.resolve(sr);
            }
            write_config(&common.out, &cfg)?;
            println!("synth: {} tracks -> {}", manifest.tracks.len(), dir.join("manifest.json").display());
        }
        Command::Extract { common, features } => {
            let p = common.prepare()?;
            for f in &features {
                let kind = parse_kind(f)?;
                let specs = extract_cached(&p, kind, &common.out)?;
                let (frames, bins) = specs[0].shape();
                println!("extract: {} {} segments of {frames}x{bins}", kind.name(), specs.len());
            }
        }
        Command::Train { common, method, name } => {
            let p = common.prepare()?;
            let plan = train_plan(&p.config.training, method);
            if name.is_some() && plan.len() > 1 {
                bail!("--name applies to a single method");
            }
            let mut kinds: Vec<FeatureKind> = plan.iter().flat_map(|(_, t)| t.features.clone()).collect();
            kinds.sort();
            kinds.dedup();
            let tables = feature_tables(&p, &kinds, Some(&common.out))?;
            for (default_name, training) in plan {
                let run_name = name.clone().unwrap_or(default_name);
                let r = with_jobs(p.config.jobs, || run_method(&p, &tables, &run_name, &training))?;
                let s = write_method(&common.out, &p, &r)?;
                println!(
                    "train: {run_name} best val {:.4} (epoch {}) test {:.4}",
                    s.best_val_accuracy,
                    r.run.best_epoch,
                    s.test_accuracy
                );
            }
        }
        Command::Eval(common) => {
            let p = common.prepare()?;
            let kinds = [FeatureKind::Mel, FeatureKind::Cqt];
            let runs = common.out.join("runs");
            let have = |n: &str| runs.join(n).join("checkpoint.iclc").exists();
            if !(have("mel") && have("cqt")) {
                bail!("eval needs trained mel and cqt runs under {}", runs.display());
            }
            let tables = feature_tables(&p, &kinds, Some(&common.out))?;
            let s = write_ensemble(&common.out, &p, &tables, ["mel", "cqt"])?;
            println!("eval: ensemble test {:.4}", s.test_accuracy);
        }
        Command::Cam { common, run, samples } => {
            let p = common.prepare()?;
            let (training, _) = load_method(&common.out, &p, &run)?;
            let tables = feature_tables(&p, &training.features, Some(&common.out))?;
            let files = write_cams(&common.out, &p, &tables, &run, &samples)?;
            println!("cam: {} files under {}", files.len(), common.out.join("cam").join(&run).display());
        }
        Command::Report(common) => {
            let rows = export_report(&common.out)?;
            for r in &rows {
                println!("report: {} {} val {:.4} test {:.4}", r.run, r.method, r.val_accuracy, r.test_accuracy);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let reason = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {reason}");
            ExitCode::FAILURE
        }
    }
}
