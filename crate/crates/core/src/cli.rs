//! Command-line entry point: data generation, training, tuning, importance
//! analysis, full experiments and report rendering.
//!
//! Exit codes: 0 on success, 1 when the pipeline fails (the message goes to
//! standard error), 2 on a usage error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dataset::{load_csv, split_deterministic, Label, RawTable, Schema};
use crate::error::{Error, Result};
use crate::gbt::{train, BoostedModel, Hyperparams};
use crate::harness::{
    decorrelated_text, emit_report, format_table, generate_synthetic, parse_aggregate_text, run_repeated,
    write_importance_bars, write_outputs, ExperimentConfig, ImportanceConfig, RunSeeds, SyntheticSpec,
};
use crate::importance::{
    decorrelated_permutation_importance, mdi_importance, permutation_importance, PermutationConfig, PermutationMetric,
};
use crate::metrics::{auc_roc, confusion_matrix, derive_rates, Metric, MetricsReport};
use crate::preprocess::{FittedPreprocessor, PreprocessConfig};
use crate::textfmt::{self, f64_17};
use crate::tuning::{prepare_folds, random_search_prepared, CvConfig};

#[derive(Debug, Parser)]
#[command(
    name = "insider-boost",
    version,
    about = "Gradient-boosted insider-trading classifier"
)]
pub struct Cli {
    /// Master seed; every random stage derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML configuration for the subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file (synth) or directory (other subcommands).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    pub jobs: Option<u32>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// Headered CSV file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Schema sidecar; defaults to the data path with `.schema.toml`.
    #[arg(long, requires = "data")]
    pub schema: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Accuracy,
    Auc,
}

impl From<MetricArg> for PermutationMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Accuracy => PermutationMetric::Accuracy,
            MetricArg::Auc => PermutationMetric::Auc,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted-signal CSV and its schema sidecar.
    Synth {
        /// Generator spec (TOML); defaults to the built-in shape.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Fit preprocessing and a model on the training split and save them.
    Train {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Random search with stratified cross-validation on the training split.
    Tune {
        #[command(flatten)]
        data: DataArgs,
    },
    /// MDI, raw permutation and decorrelated permutation importance for a
    /// saved model.
    Importance {
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Permutations per feature.
        #[arg(long)]
        repeats: Option<usize>,
        /// Ward-distance cut for the decorrelated ranking.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_enum)]
        metric: Option<MetricArg>,
    },
    /// Repeated resampling over every configured cell.
    Experiment {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Re-render the metrics table from a saved `aggregate.txt`.
    Report {
        /// Experiment output directory or aggregate file.
        #[arg(long)]
        input: PathBuf,
    },
}

/// Settings for `train`, also written next to the model so `importance` can
/// rebuild the same split and refit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub train_fraction: f64,
    pub params: Hyperparams,
    pub preprocess: PreprocessConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            train_fraction: 0.8,
            params: Hyperparams::default(),
            preprocess: PreprocessConfig::default(),
        }
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = textfmt::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value).map_err(|e| Error::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    textfmt::write_string(path, &text)
}

impl DataArgs {
    fn load(&self) -> Result<Option<RawTable>> {
        let Some(path) = &self.data else {
            return Ok(None);
        };
        let schema_path = self
            .schema
            .clone()
            .unwrap_or_else(|| path.with_extension("schema.toml"));
        let schema = Schema::load(&schema_path)?;
        load_csv(path, &schema).map(Some)
    }

    fn require(&self, command: &str) -> Result<RawTable> {
        self.load()?
            .ok_or_else(|| Error::InvalidArgument(format!("`{command}` needs --data")))
    }
}

fn config_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_experiment(cli: &Cli, data: &DataArgs) -> Result<(ExperimentConfig, RawTable, PathBuf)> {
    let (mut config, base) = match &cli.config {
        Some(path) => (ExperimentConfig::load(path)?, config_base(path)),
        None => (ExperimentConfig::default(), PathBuf::new()),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let table = match data.load()? {
        Some(t) => t,
        None => config.data.load(&base)?,
    };
    Ok((config, table, base))
}

fn load_train_config(cli: &Cli) -> Result<TrainConfig> {
    let mut config: TrainConfig = match &cli.config {
        Some(path) => read_toml(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.params.seed = seed;
    }
    config.params.validate()?;
    Ok(config)
}

fn labels_of(table: &RawTable, rows: &[usize]) -> Vec<Label> {
    rows.iter().map(|&r| table.labels()[r]).collect()
}

fn test_metrics(
    model: &BoostedModel,
    matrix: &crate::preprocess::EncodedMatrix,
    labels: &[Label],
) -> Result<MetricsReport> {
    let proba = model.predict_proba(matrix)?;
    let predicted: Vec<Label> = proba.iter().map(|&p| Label::from_bool(p >= 0.5)).collect();
    let mut metrics = derive_rates(&confusion_matrix(labels, &predicted)?)?;
    metrics.auc = Some(auc_roc(labels, &proba)?);
    Ok(metrics)
}

fn metrics_text(metrics: &MetricsReport) -> String {
    let mut s = String::new();
    for m in Metric::ALL {
        let v = metrics.get(m).map_or("-".to_string(), f64_17);
        s.push_str(&format!("metric {} {v}\n", m.name()));
    }
    s
}

fn synth(cli: &Cli, spec: &Option<PathBuf>, out: &mut dyn Write) -> Result<()> {
    let mut spec: SyntheticSpec = match spec {
        Some(path) => read_toml(path)?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let path = cli.out.clone().unwrap_or_else(|| PathBuf::from("data.csv"));
    let table = generate_synthetic(&spec)?;
    let schema = table.schema();
    table.write_csv(&path, &schema)?;
    let schema_path = path.with_extension("schema.toml");
    schema.save(&schema_path)?;
    let (lawful, unlawful) = table.class_counts();
    let _ = writeln!(
        out,
        "wrote {} ({} rows, {} features, {lawful} lawful / {unlawful} unlawful) and {}",
        path.display(),
        table.n_rows(),
        table.n_features(),
        schema_path.display()
    );
    Ok(())
}

fn train_cmd(cli: &Cli, data: &DataArgs, out: &mut dyn Write) -> Result<()> {
    let table = data.require("train")?;
    let config = load_train_config(cli)?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("model"));
    let seeds = RunSeeds::derive(config.seed, 0);
    let split = split_deterministic(table.labels(), config.train_fraction, seeds.split)?;
    let fitted = FittedPreprocessor::fit(&table, &split.train, &config.preprocess)?;
    let train_m = fitted.transform(&table, &split.train)?;
    let test_m = fitted.transform(&table, &split.test)?;
    let model = train(&train_m, &labels_of(&table, &split.train), &config.params)?;
    let metrics = test_metrics(&model, &test_m, &labels_of(&table, &split.test))?;

    model.save(&dir.join("model.txt"))?;
    fitted.save(&dir.join("transforms.txt"))?;
    write_toml(&dir.join("train.toml"), &config)?;
    let text = metrics_text(&metrics);
    textfmt::write_string(&dir.join("metrics.txt"), &text)?;
    let _ = writeln!(out, "model written to {}", dir.display());
    let _ = write!(out, "{text}");
    Ok(())
}

fn tune_cmd(cli: &Cli, data: &DataArgs, out: &mut dyn Write) -> Result<()> {
    let (config, table, _) = load_experiment(cli, data)?;
    config.cv.validate()?;
    config.search.validate()?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("tuning"));
    let seeds = RunSeeds::derive(config.seed, 0);
    let split = split_deterministic(table.labels(), config.train_fraction, seeds.split)?;
    let cv = CvConfig {
        seed: seeds.tune,
        ..config.cv
    };
    let folds = prepare_folds(&table, &split.train, &cv, &config.preprocess)?;
    let result = random_search_prepared(&folds, &config.search, &cv)?;
    let params = result.final_params();
    let best = TrainConfig {
        seed: config.seed,
        train_fraction: config.train_fraction,
        params,
        preprocess: config.preprocess,
    };
    textfmt::write_string(&dir.join("tuning.txt"), &result.audit_text())?;
    write_toml(&dir.join("train.toml"), &best)?;
    let b = result.best();
    let _ = writeln!(
        out,
        "best candidate {} mean AUC {:.4}: ntrees {} eta {:.4} max_depth {}",
        result.best_index, b.cv.mean_auc, params.ntrees, params.eta, params.max_depth
    );
    let _ = writeln!(out, "settings written to {}", dir.join("train.toml").display());
    Ok(())
}

fn importance_cmd(
    cli: &Cli,
    model_dir: &Path,
    data: &DataArgs,
    overrides: (Option<usize>, Option<f64>, Option<MetricArg>),
    out: &mut dyn Write,
) -> Result<()> {
    let table = data.require("importance")?;
    let train_cfg: TrainConfig = read_toml(&model_dir.join("train.toml"))?;
    let model = BoostedModel::load(&model_dir.join("model.txt"))?;
    let fitted = FittedPreprocessor::load(&model_dir.join("transforms.txt"))?;
    let mut imp: ImportanceConfig = match &cli.config {
        Some(path) => read_toml(path)?,
        None => ImportanceConfig::default(),
    };
    let (repeats, threshold, metric) = overrides;
    imp.repeats = repeats.unwrap_or(imp.repeats);
    imp.threshold = threshold.unwrap_or(imp.threshold);
    imp.metric = metric.map_or(imp.metric, PermutationMetric::from);
    if imp.repeats < 1 {
        return Err(Error::InvalidArgument("importance repeats must be at least 1".into()));
    }
    let master = cli.seed.unwrap_or(train_cfg.seed);
    let seeds = RunSeeds::derive(train_cfg.seed, 0);
    let split = split_deterministic(table.labels(), train_cfg.train_fraction, seeds.split)?;
    let train_m = fitted.transform(&table, &split.train)?;
    let test_m = fitted.transform(&table, &split.test)?;
    let train_y = labels_of(&table, &split.train);
    let test_y = labels_of(&table, &split.test);
    let perm = PermutationConfig {
        metric: imp.metric,
        repeats: imp.repeats,
        seed: RunSeeds::derive(master, 0).permute,
    };

    let mdi = mdi_importance(&model)?;
    let raw = permutation_importance(&model, &test_m, &test_y, &perm)?;
    let params = train_cfg.params;
    let decorrelated =
        decorrelated_permutation_importance(&train_m, &train_y, &test_m, &test_y, imp.threshold, &perm, |m, y| {
            train(m, y, &params)
        })?;

    let dir = cli.out.clone().unwrap_or_else(|| model_dir.to_path_buf());
    textfmt::write_string(&dir.join("mdi.txt"), &mdi.to_text())?;
    textfmt::write_string(&dir.join("permutation-raw.txt"), &raw.to_text())?;
    textfmt::write_string(
        &dir.join("permutation-decorrelated.txt"),
        &decorrelated_text(&decorrelated),
    )?;
    write_importance_bars(&mdi, &dir, "mdi")?;
    write_importance_bars(&raw, &dir, "permutation-raw")?;
    write_importance_bars(&decorrelated.report, &dir, "permutation-decorrelated")?;
    let _ = writeln!(out, "importance reports written to {}", dir.display());
    for (title, report) in [("raw", &raw), ("decorrelated", &decorrelated.report)] {
        let top: Vec<String> = report.entries.iter().take(5).map(|e| e.name.clone()).collect();
        let _ = writeln!(out, "top {title}: {}", top.join(", "));
    }
    Ok(())
}

fn experiment_cmd(cli: &Cli, data: &DataArgs, out: &mut dyn Write) -> Result<()> {
    if cli.config.is_none() {
        return Err(Error::InvalidArgument("`experiment` needs --config".into()));
    }
    let (config, table, base) = load_experiment(cli, data)?;
    let dir = match (&cli.out, &config.output_dir) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => base.join(d),
        (None, None) => PathBuf::from("results"),
    };
    let outcome = run_repeated(&table, &config)?;
    write_outputs(&outcome, &config, &dir)?;
    let _ = write!(out, "{}", format_table(&outcome.aggregate));
    let _ = writeln!(out, "\noutputs written to {}", dir.display());
    Ok(())
}

fn report_cmd(cli: &Cli, input: &Path, out: &mut dyn Write) -> Result<()> {
    let path = if input.is_dir() {
        input.join("aggregate.txt")
    } else {
        input.to_path_buf()
    };
    let aggregate = parse_aggregate_text(&textfmt::read_to_string(&path)?)?;
    if let Some(dir) = &cli.out {
        emit_report(&aggregate, dir)?;
    }
    let _ = write!(out, "{}", format_table(&aggregate));
    Ok(())
}

/// Runs a parsed command, writing progress and tables to `out`.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let dispatch = |out: &mut Vec<u8>| match &cli.command {
        Command::Synth { spec } => synth(cli, spec, out),
        Command::Train { data } => train_cmd(cli, data, out),
        Command::Tune { data } => tune_cmd(cli, data, out),
        Command::Importance {
            model,
            data,
            repeats,
            threshold,
            metric,
        } => importance_cmd(cli, model, data, (*repeats, *threshold, *metric), out),
        Command::Experiment { data } => experiment_cmd(cli, data, out),
        Command::Report { input } => report_cmd(cli, input, out),
    };
    let mut buf = Vec::new();
    let result = match cli.jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n as usize)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("cannot start {n} workers: {e}")))?;
            pool.install(|| dispatch(&mut buf))
        }
        None => dispatch(&mut buf),
    };
    let _ = out.write_all(&buf);
    result
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let stdout = std::io::stdout();
    match execute(&cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("insider-boost").chain(args.iter().copied()))
    }

    #[test]
    fn parses_documented_forms() {
        let c = parse(&["synth", "--spec", "spec.cfg", "--out", "data.csv"]).unwrap();
        assert!(matches!(c.command, Command::Synth { spec: Some(_) }));
        assert_eq!(c.out.as_deref(), Some(Path::new("data.csv")));
        let c = parse(&["experiment", "--config", "exp.cfg", "--jobs", "3", "--seed", "9"]).unwrap();
        assert!(matches!(c.command, Command::Experiment { .. }));
        assert_eq!((c.jobs, c.seed), (Some(3), Some(9)));
        // global flags may precede the subcommand
        let c = parse(&["--seed", "4", "train", "--data", "d.csv"]).unwrap();
        assert_eq!(c.seed, Some(4));
    }

    #[test]
    fn rejects_bad_usage() {
        let e = parse(&["train", "--bogus"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert_eq!(parse(&[]).unwrap_err().exit_code(), 2);
        assert_eq!(parse(&["experiment", "--jobs", "0"]).unwrap_err().exit_code(), 2);
        assert_eq!(parse(&["train", "--schema", "s.toml"]).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn help_lists_every_flag() {
        let mut cmd = Cli::command();
        cmd.build();
        let help = cmd.render_long_help().to_string();
        for flag in ["--seed", "--config", "--out", "--jobs"] {
            assert!(help.contains(flag), "{flag}");
        }
        let imp = cmd.find_subcommand_mut("importance").unwrap();
        let help = imp.render_long_help().to_string();
        for flag in ["--model", "--data", "--schema", "--repeats", "--threshold", "--metric"] {
            assert!(help.contains(flag), "{flag}");
        }
    }

    #[test]
    fn train_config_round_trips() {
        let c = TrainConfig {
            seed: 7,
            params: Hyperparams {
                eta: 0.1,
                ntrees: 12,
                ..Hyperparams::default()
            },
            ..TrainConfig::default()
        };
        let text = toml::to_string_pretty(&c).unwrap();
        assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), c);
        assert!(toml::from_str::<TrainConfig>("bogus = 1").is_err());
    }
}
