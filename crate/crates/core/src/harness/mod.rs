//! Repeated-resampling experiments: balanced sampling, split, tuning, final
//! fit, test evaluation, importance, and aggregation over repetitions.

mod report;
mod synthetic;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use report::{
    aggregate_text, decorrelated_text, emit_plot_data, emit_report, emit_run_audit, format_table, parse_aggregate_text,
    parse_table, write_importance_bars, ParsedTable,
};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::dataset::{
    load_csv, sample_balanced, sample_per_class, split_deterministic, RawTable, Schema, SplitIndices,
};
use crate::error::{Error, Result};
use crate::gbt::{train, Hyperparams};
use crate::importance::{
    decorrelated_permutation_importance, mdi_importance, permutation_importance, DecorrelatedImportance,
    ImportanceReport, PermutationConfig, PermutationMetric,
};
use crate::metrics::{auc_roc, confusion_matrix, derive_rates, ConfusionMatrix, Metric, MetricsReport};
use crate::preprocess::{FittedPreprocessor, PcaMode, PreprocessConfig};
use crate::seeds;
use crate::tuning::{prepare_folds, random_search_prepared, CvConfig, SearchSpace, TuningResult};

/// Where the experiment's table comes from: a CSV with its schema, or a
/// generator spec.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
}

impl DataConfig {
    /// Loads or generates the table. Relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<RawTable> {
        match (&self.path, &self.synthetic) {
            (Some(path), None) => {
                let schema_path = self
                    .schema
                    .clone()
                    .unwrap_or_else(|| path.with_extension("schema.toml"));
                let schema = Schema::load(&base.join(schema_path))?;
                load_csv(&base.join(path), &schema)
            }
            (None, Some(spec)) => generate_synthetic(spec),
            (None, None) => generate_synthetic(&SyntheticSpec::default()),
            (Some(_), Some(_)) => Err(Error::InvalidArgument(
                "data config sets both `path` and `synthetic`".into(),
            )),
        }
    }
}

/// One column of the final table: data volume, feature subset and PCA.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellConfig {
    /// Total balanced rows to keep (half per class); `None` keeps all.
    pub transactions: Option<usize>,
    /// Keep the first `features` features in schema order.
    pub features: Option<usize>,
    /// Explicit feature list; overrides `features`.
    pub feature_names: Option<Vec<String>>,
    pub pca: bool,
}

impl CellConfig {
    pub fn label(&self, table: &RawTable) -> String {
        let tx = self.transactions.unwrap_or(table.n_rows());
        let feats = match (&self.feature_names, self.features) {
            (Some(names), _) => names.len(),
            (None, Some(k)) => k,
            (None, None) => table.n_features(),
        };
        let pca = if self.pca { "PCA" } else { "No PCA" };
        format!("{tx} tx / {feats} feat / {pca}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImportanceConfig {
    pub enabled: bool,
    /// Ward-distance cut for the decorrelated ranking.
    pub threshold: f64,
    pub repeats: usize,
    pub metric: PermutationMetric,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        ImportanceConfig {
            enabled: true,
            threshold: 1.0,
            repeats: 10,
            metric: PermutationMetric::Accuracy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub repetitions: usize,
    pub seed: u64,
    pub train_fraction: f64,
    /// Tune on repetition 0 only and reuse its settings afterwards.
    pub tune_once: bool,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub cells: Vec<CellConfig>,
    pub cv: CvConfig,
    pub search: SearchSpace,
    pub preprocess: PreprocessConfig,
    pub importance: ImportanceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            repetitions: 100,
            seed: 0,
            train_fraction: 0.8,
            tune_once: false,
            output_dir: None,
            data: DataConfig::default(),
            cells: vec![CellConfig::default()],
            cv: CvConfig::default(),
            search: SearchSpace::default(),
            preprocess: PreprocessConfig::default(),
            importance: ImportanceConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self, table: &RawTable) -> Result<()> {
        if self.repetitions < 1 {
            return Err(Error::InvalidArgument("repetitions must be at least 1".into()));
        }
        if self.cells.is_empty() {
            return Err(Error::InvalidArgument("experiment has no cells".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "train fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        self.cv.validate()?;
        self.search.validate()?;
        if self.importance.enabled && self.importance.repeats < 1 {
            return Err(Error::InvalidArgument("importance repeats must be at least 1".into()));
        }
        for cell in &self.cells {
            if let Some(k) = cell.features {
                if k == 0 || k > table.n_features() {
                    return Err(Error::InvalidArgument(format!(
                        "feature subset {k} outside 1..={}",
                        table.n_features()
                    )));
                }
            }
            if let Some(names) = &cell.feature_names {
                for n in names {
                    if !table.specs().iter().any(|s| s.name == *n) {
                        return Err(Error::InvalidArgument(format!("unknown feature `{n}` in cell")));
                    }
                }
            }
            if cell.transactions.is_some_and(|t| t < 4) {
                return Err(Error::InvalidArgument("transactions cap must be at least 4".into()));
            }
        }
        Ok(())
    }
}

/// Seeds of every random stage of one repetition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub sample: u64,
    /// Depends on the master seed only, so capped runs share unlawful rows.
    pub cap_unlawful: u64,
    pub cap_lawful: u64,
    pub split: u64,
    pub tune: u64,
    pub permute: u64,
}

impl RunSeeds {
    pub fn derive(master: u64, repetition: usize) -> RunSeeds {
        let rep = repetition as u64;
        RunSeeds {
            sample: seeds::stage_seed(master, rep, "sample"),
            cap_unlawful: seeds::derive(master, &[seeds::tag("cap-unlawful")]),
            cap_lawful: seeds::stage_seed(master, rep, "cap-lawful"),
            split: seeds::stage_seed(master, rep, "split"),
            tune: seeds::stage_seed(master, rep, "tune"),
            permute: seeds::stage_seed(master, rep, "permute"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunImportance {
    /// `None` when the final model made no splits.
    pub mdi: Option<ImportanceReport>,
    pub raw: ImportanceReport,
    pub decorrelated: DecorrelatedImportance,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub repetition: usize,
    pub seeds: RunSeeds,
    /// Rows of the input table used in this run, in working order.
    pub source_rows: Vec<usize>,
    /// Train/test positions within `source_rows`.
    pub split: SplitIndices,
    /// Raw features used.
    pub features: Vec<String>,
    /// Encoded model inputs after preprocessing.
    pub model_inputs: Vec<String>,
    /// `None` when settings were reused from repetition 0.
    pub tuning: Option<TuningResult>,
    pub params: Hyperparams,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
    pub importance: Option<RunImportance>,
}

fn working_table(table: &RawTable, cell: &CellConfig, seeds: &RunSeeds) -> Result<(RawTable, Vec<usize>)> {
    let balanced = sample_balanced(table, 0.5, seeds.sample)?;
    let (mut work, mut rows) = (balanced.table, balanced.source_rows);
    if let Some(cap) = cell.transactions {
        if cap < work.n_rows() {
            let (capped, picked) = sample_per_class(&work, cap / 2, seeds.cap_unlawful, seeds.cap_lawful)?;
            rows = picked.iter().map(|&i| rows[i]).collect();
            work = capped;
        }
    }
    if let Some(names) = &cell.feature_names {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| work.specs().iter().position(|s| s.name == *n))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::InvalidArgument("unknown feature in cell".into()))?;
        work = work.select_features(&idx)?;
    } else if let Some(k) = cell.features {
        work = work.first_features(k)?;
    }
    Ok((work, rows))
}

/// Runs one repetition of one cell. All randomness is derived from
/// `(config.seed, repetition)`; the cell only changes what is fed to the
/// model, never which rows are drawn.
pub fn run_experiment(
    table: &RawTable,
    config: &ExperimentConfig,
    cell: &CellConfig,
    repetition: usize,
) -> Result<RunResult> {
    run_with(table, config, cell, repetition, None)
}

fn run_with(
    table: &RawTable,
    config: &ExperimentConfig,
    cell: &CellConfig,
    repetition: usize,
    reuse: Option<&Hyperparams>,
) -> Result<RunResult> {
    let seeds = RunSeeds::derive(config.seed, repetition);
    let (work, source_rows) = working_table(table, cell, &seeds)?;
    let split = split_deterministic(work.labels(), config.train_fraction, seeds.split)?;
    let preprocess = PreprocessConfig {
        pca: cell.pca,
        ..config.preprocess
    };

    let (tuning, params) = match reuse {
        Some(p) => (None, *p),
        None => {
            let cv = CvConfig {
                seed: seeds.tune,
                ..config.cv
            };
            let folds = prepare_folds(&work, &split.train, &cv, &preprocess)?;
            let result = random_search_prepared(&folds, &config.search, &cv)?;
            let params = result.final_params();
            (Some(result), params)
        }
    };

    let fitted = FittedPreprocessor::fit(&work, &split.train, &preprocess)?;
    let train_m = fitted.transform(&work, &split.train)?;
    let test_m = fitted.transform(&work, &split.test)?;
    let train_y: Vec<_> = split.train.iter().map(|&r| work.labels()[r]).collect();
    let test_y: Vec<_> = split.test.iter().map(|&r| work.labels()[r]).collect();
    let model = train(&train_m, &train_y, &params)?;

    let proba = model.predict_proba(&test_m)?;
    let predicted: Vec<_> = proba
        .iter()
        .map(|&p| crate::dataset::Label::from_bool(p >= 0.5))
        .collect();
    let confusion = confusion_matrix(&test_y, &predicted)?;
    let mut metrics = derive_rates(&confusion)?;
    metrics.auc = Some(auc_roc(&test_y, &proba)?);

    let importance = if config.importance.enabled {
        let perm = PermutationConfig {
            metric: config.importance.metric,
            repeats: config.importance.repeats,
            seed: seeds.permute,
        };
        let mdi = mdi_importance(&model).ok();
        let raw = permutation_importance(&model, &test_m, &test_y, &perm)?;
        let decorrelated = decorrelated_permutation_importance(
            &train_m,
            &train_y,
            &test_m,
            &test_y,
            config.importance.threshold,
            &perm,
            |m, y| train(m, y, &params),
        )?;
        Some(RunImportance { mdi, raw, decorrelated })
    } else {
        None
    };

    Ok(RunResult {
        repetition,
        seeds,
        source_rows,
        split,
        features: work.specs().iter().map(|s| s.name.clone()).collect(),
        model_inputs: train_m.names().to_vec(),
        tuning,
        params,
        confusion,
        metrics,
        importance,
    })
}

/// Mean, population σ and range of one metric over the runs where it is
/// defined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub defined: usize,
}

impl MetricSummary {
    pub fn from_values(values: &[f64]) -> MetricSummary {
        if values.is_empty() {
            return MetricSummary {
                mean: None,
                std: None,
                min: None,
                max: None,
                defined: 0,
            };
        }
        let k = values.len() as f64;
        let mean = values.iter().sum::<f64>() / k;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Summation rounding can push the mean a hair outside the range.
        MetricSummary {
            mean: Some(mean.clamp(min, max)),
            std: Some(if min == max { 0.0 } else { var.sqrt() }),
            min: Some(min),
            max: Some(max),
            defined: values.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellAggregate {
    pub label: String,
    pub runs: usize,
    /// In [`Metric::ALL`] order.
    pub metrics: Vec<(Metric, MetricSummary)>,
}

impl CellAggregate {
    pub fn from_runs(label: String, runs: &[RunResult]) -> CellAggregate {
        let metrics = Metric::ALL
            .iter()
            .map(|&m| {
                let values: Vec<f64> = runs.iter().filter_map(|r| r.metrics.get(m)).collect();
                (m, MetricSummary::from_values(&values))
            })
            .collect();
        CellAggregate {
            label,
            runs: runs.len(),
            metrics,
        }
    }

    pub fn summary(&self, metric: Metric) -> MetricSummary {
        self.metrics
            .iter()
            .find(|(m, _)| *m == metric)
            .expect("all metrics present")
            .1
    }

    pub fn mean(&self, metric: Metric) -> Option<f64> {
        self.summary(metric).mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub repetitions: usize,
    pub cells: Vec<CellAggregate>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub aggregate: AggregateReport,
    /// Per cell, runs in repetition order.
    pub runs: Vec<Vec<RunResult>>,
}

/// Every repetition of every cell, run on the current rayon pool and
/// collected in (cell, repetition) order. With `tune_once`, repetition 0 of
/// each cell is tuned first and its settings reused by the others.
pub fn run_repeated(table: &RawTable, config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate(table)?;
    let wrap = |index: usize| {
        move |e: Error| Error::Repetition {
            index,
            source: Box::new(e),
        }
    };
    let mut runs = Vec::with_capacity(config.cells.len());
    for cell in &config.cells {
        let cell_runs: Vec<RunResult> = if config.tune_once {
            let first = run_with(table, config, cell, 0, None).map_err(wrap(0))?;
            let params = first.params;
            let rest = (1..config.repetitions)
                .into_par_iter()
                .map(|r| run_with(table, config, cell, r, Some(&params)).map_err(wrap(r)))
                .collect::<Result<Vec<_>>>()?;
            std::iter::once(first).chain(rest).collect()
        } else {
            (0..config.repetitions)
                .into_par_iter()
                .map(|r| run_with(table, config, cell, r, None).map_err(wrap(r)))
                .collect::<Result<Vec<_>>>()?
        };
        runs.push(cell_runs);
    }
    let cells = config
        .cells
        .iter()
        .zip(&runs)
        .map(|(cell, r)| CellAggregate::from_runs(cell.label(table), r))
        .collect();
    Ok(ExperimentOutcome {
        aggregate: AggregateReport {
            repetitions: config.repetitions,
            cells,
        },
        runs,
    })
}

/// Writes the whole output tree under `dir`: `report.txt`,
/// `aggregate.txt`, the resolved `config.toml`, per-repetition audits under
/// `runs/cell_KK/rep_RRR/` and plot data under `plots/cell_KK/`.
pub fn write_outputs(outcome: &ExperimentOutcome, config: &ExperimentConfig, dir: &Path) -> Result<()> {
    emit_report(&outcome.aggregate, dir)?;
    crate::textfmt::write_string(&dir.join("config.toml"), &config.to_toml())?;
    for (k, runs) in outcome.runs.iter().enumerate() {
        for run in runs {
            let run_dir = dir.join(format!("runs/cell_{k:02}/rep_{:03}", run.repetition));
            emit_run_audit(run, config, k, &run_dir)?;
        }
    }
    emit_plot_data(outcome, &dir.join("plots"))
}

/// PCA mode label used in audit files.
pub(crate) fn pca_mode_name(cfg: &PreprocessConfig, cell: &CellConfig) -> &'static str {
    match (cell.pca, cfg.pca_mode) {
        (false, _) => "off",
        (true, PcaMode::Replace) => "replace",
        (true, PcaMode::Augment) => "augment",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Label;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            repetitions: 2,
            seed: 3,
            cv: CvConfig {
                folds: 3,
                tuning_iterations: 2,
                early_stop_patience: 5,
                seed: 0,
            },
            search: SearchSpace {
                ntrees: [10, 20],
                max_depth: [2, 3],
                ..SearchSpace::default()
            },
            importance: ImportanceConfig {
                repeats: 2,
                ..ImportanceConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    fn tiny_table() -> RawTable {
        let spec = SyntheticSpec {
            n_rows: 240,
            numeric: 8,
            categorical: 2,
            cardinality: 3,
            informative: 3,
            blocks: 1,
            block_size: 2,
            separation: 2.0,
            seed: 1,
            ..SyntheticSpec::default()
        };
        // Make the pool lawful-heavy so balanced sampling has a choice.
        let t = generate_synthetic(&spec).unwrap();
        let labels: Vec<Label> = t
            .labels()
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                if l == Label::Unlawful && i % 3 == 0 {
                    Label::Lawful
                } else {
                    l
                }
            })
            .collect();
        t.with_labels(labels).unwrap()
    }

    #[test]
    fn unlawful_rows_fixed_across_repetitions() {
        let t = tiny_table();
        let cfg = tiny_config();
        let cell = CellConfig {
            transactions: Some(100),
            ..CellConfig::default()
        };
        let a = run_experiment(&t, &cfg, &cell, 0).unwrap();
        let b = run_experiment(&t, &cfg, &cell, 1).unwrap();
        let unlawful = |r: &RunResult| -> Vec<usize> {
            r.source_rows
                .iter()
                .copied()
                .filter(|&i| t.labels()[i] == Label::Unlawful)
                .collect()
        };
        let lawful = |r: &RunResult| -> Vec<usize> {
            r.source_rows
                .iter()
                .copied()
                .filter(|&i| t.labels()[i] == Label::Lawful)
                .collect()
        };
        assert_eq!(unlawful(&a), unlawful(&b));
        assert_ne!(lawful(&a), lawful(&b));
        assert_eq!(a.source_rows.len(), 100);
    }

    #[test]
    fn pca_toggle_keeps_sampling() {
        let t = tiny_table();
        let cfg = tiny_config();
        let off = run_experiment(&t, &cfg, &CellConfig::default(), 0).unwrap();
        let on = run_experiment(
            &t,
            &cfg,
            &CellConfig {
                pca: true,
                ..CellConfig::default()
            },
            0,
        )
        .unwrap();
        assert_eq!(off.source_rows, on.source_rows);
        assert_eq!(off.split, on.split);
        assert_ne!(off.model_inputs, on.model_inputs);
        assert!(on.model_inputs[0].starts_with("PC"));
    }

    #[test]
    fn rerun_is_identical() {
        let t = tiny_table();
        let cfg = tiny_config();
        let a = run_experiment(&t, &cfg, &CellConfig::default(), 1).unwrap();
        let b = run_experiment(&t, &cfg, &CellConfig::default(), 1).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.tuning, b.tuning);
        let (ia, ib) = (a.importance.unwrap(), b.importance.unwrap());
        assert_eq!(ia.raw, ib.raw);
        assert_eq!(ia.decorrelated.report, ib.decorrelated.report);
    }

    #[test]
    fn single_repetition_aggregate() {
        let t = tiny_table();
        let cfg = ExperimentConfig {
            repetitions: 1,
            ..tiny_config()
        };
        let out = run_repeated(&t, &cfg).unwrap();
        let cell = &out.aggregate.cells[0];
        assert_eq!(cell.runs, 1);
        let acc = cell.summary(Metric::Acc);
        assert_eq!(acc.mean, out.runs[0][0].metrics.acc);
        assert_eq!(acc.std, Some(0.0));
    }

    #[test]
    fn tune_once_reuses_settings() {
        let t = tiny_table();
        let cfg = ExperimentConfig {
            tune_once: true,
            ..tiny_config()
        };
        let out = run_repeated(&t, &cfg).unwrap();
        let runs = &out.runs[0];
        assert!(runs[0].tuning.is_some() && runs[1].tuning.is_none());
        assert_eq!(runs[0].params, runs[1].params);
    }

    #[test]
    fn summary_invariants() {
        let s = MetricSummary::from_values(&[0.1, 0.2, 0.4]);
        assert!(s.mean.unwrap() >= 0.1 && s.mean.unwrap() <= 0.4);
        assert!(s.std.unwrap() > 0.0);
        let s = MetricSummary::from_values(&[0.3; 4]);
        assert_eq!((s.mean, s.std), (Some(0.3), Some(0.0)));
        assert_eq!(MetricSummary::from_values(&[]).defined, 0);
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = ExperimentConfig {
            cells: vec![
                CellConfig {
                    transactions: Some(320),
                    features: Some(25),
                    ..CellConfig::default()
                },
                CellConfig {
                    pca: true,
                    ..CellConfig::default()
                },
            ],
            data: DataConfig {
                synthetic: Some(SyntheticSpec::default()),
                ..DataConfig::default()
            },
            ..tiny_config()
        };
        let back = ExperimentConfig::from_toml(&cfg.to_toml(), Path::new("x.toml")).unwrap();
        assert_eq!(back, cfg);
        assert!(ExperimentConfig::from_toml("bogus = 1", Path::new("x.toml")).is_err());
    }
}
