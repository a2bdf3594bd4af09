//! Feature rankings: mean decrease in impurity (split-gain totals),
//! permutation importance, and permutation importance after collapsing
//! correlated features to one representative each.

mod cluster;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cluster::{
    average_ranks, cut_clusters, select_representatives, spearman_matrix, ward_cluster, ClusterAssignment,
    CorrelationMatrix, Linkage, Merge,
};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::gbt::{logit, sigmoid, BoostedModel};
use crate::metrics::auc_roc;
use crate::preprocess::EncodedMatrix;
use crate::seeds;
use crate::textfmt::f64_17;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImportanceMethod {
    Mdi,
    PermutationRaw,
    PermutationDecorrelated,
}

impl ImportanceMethod {
    pub fn tag(self) -> &'static str {
        match self {
            ImportanceMethod::Mdi => "mdi",
            ImportanceMethod::PermutationRaw => "permutation-raw",
            ImportanceMethod::PermutationDecorrelated => "permutation-decorrelated",
        }
    }
}

/// Score dropped when a column is permuted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PermutationMetric {
    #[default]
    Accuracy,
    Auc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceEntry {
    pub name: String,
    /// Normalized gain share for MDI, mean metric drop for permutation.
    pub score: f64,
    /// 1-based position in the sorted report.
    pub rank: usize,
    /// Summed split gain (MDI only).
    pub raw_gain: Option<f64>,
    /// Population σ of the drop across repeats (permutation only).
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    pub method: ImportanceMethod,
    pub metric: Option<PermutationMetric>,
    pub repeats: Option<usize>,
    /// Baseline metric before any permutation.
    pub baseline: Option<f64>,
    /// Sorted by non-increasing score; ties keep column order.
    pub entries: Vec<ImportanceEntry>,
}

impl ImportanceReport {
    fn from_unsorted(
        method: ImportanceMethod,
        mut entries: Vec<ImportanceEntry>,
        metric: Option<PermutationMetric>,
        repeats: Option<usize>,
        baseline: Option<f64>,
    ) -> Self {
        entries.sort_by(|a, b| b.score.total_cmp(&a.score));
        for (i, e) in entries.iter_mut().enumerate() {
            e.rank = i + 1;
        }
        ImportanceReport {
            method,
            metric,
            repeats,
            baseline,
            entries,
        }
    }

    /// Mean score per feature over several reports of the same method. A
    /// feature missing from a report counts as 0 there; `std` is the
    /// population σ across reports. Feature order for ties is first-seen.
    pub fn average(reports: &[&ImportanceReport]) -> Result<ImportanceReport> {
        let first = reports.first().ok_or(Error::EmptyReport)?;
        let mut names: Vec<&str> = Vec::new();
        for r in reports {
            for e in &r.entries {
                if !names.contains(&e.name.as_str()) {
                    names.push(&e.name);
                }
            }
        }
        let k = reports.len() as f64;
        let entries = names
            .iter()
            .map(|&name| {
                let scores: Vec<f64> = reports.iter().map(|r| r.score_of(name).unwrap_or(0.0)).collect();
                let mean = scores.iter().sum::<f64>() / k;
                let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / k;
                ImportanceEntry {
                    name: name.to_string(),
                    score: mean,
                    rank: 0,
                    raw_gain: None,
                    std: Some(var.sqrt()),
                }
            })
            .collect();
        Ok(ImportanceReport::from_unsorted(
            first.method,
            entries,
            first.metric,
            first.repeats,
            None,
        ))
    }

    pub fn score_of(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.score)
    }

    /// Scores divided by the largest absolute score (all zero if that is 0).
    pub fn max_normalized(&self) -> Vec<f64> {
        let max = self.entries.iter().map(|e| e.score.abs()).fold(0.0, f64::max);
        self.entries
            .iter()
            .map(|e| if max > 0.0 { e.score / max } else { 0.0 })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "importance {}", self.method.tag());
        if let Some(m) = self.metric {
            let _ = write!(
                s,
                " metric {}",
                if m == PermutationMetric::Accuracy {
                    "accuracy"
                } else {
                    "auc"
                }
            );
        }
        if let Some(r) = self.repeats {
            let _ = write!(s, " repeats {r}");
        }
        if let Some(b) = self.baseline {
            let _ = write!(s, " baseline {}", f64_17(b));
        }
        s.push('\n');
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(7).max(7);
        let _ = writeln!(
            s,
            "{:>4}  {:<width$}  {:>24}  {:>24}  {:>24}",
            "rank", "feature", "score", "normalized", "std_or_gain"
        );
        for (e, norm) in self.entries.iter().zip(self.max_normalized()) {
            let extra = e.std.or(e.raw_gain).map_or("-".to_string(), f64_17);
            let _ = writeln!(
                s,
                "{:>4}  {:<width$}  {:>24}  {:>24}  {:>24}",
                e.rank,
                e.name,
                f64_17(e.score),
                f64_17(norm),
                extra
            );
        }
        s
    }

    /// `feature,score,normalized` rows in rank order, for bar charts.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("feature,score,normalized\n");
        for (e, norm) in self.entries.iter().zip(self.max_normalized()) {
            let _ = writeln!(
                s,
                "{},{},{}",
                cluster::csv_field(&e.name),
                f64_17(e.score),
                f64_17(norm)
            );
        }
        s
    }
}

/// Split-gain totals per feature normalized to sum 1. Unused features score 0.
pub fn mdi_importance(model: &BoostedModel) -> Result<ImportanceReport> {
    let n_splits: usize = model.trees.iter().map(|t| t.split_gains().count()).sum();
    if n_splits == 0 {
        return Err(Error::NoSplits);
    }
    let totals = model.gain_totals();
    let sum: f64 = totals.iter().sum();
    let entries = model
        .feature_names
        .iter()
        .zip(&totals)
        .map(|(name, &g)| ImportanceEntry {
            name: name.clone(),
            score: if sum > 0.0 { g / sum } else { 0.0 },
            rank: 0,
            raw_gain: Some(g),
            std: None,
        })
        .collect();
    Ok(ImportanceReport::from_unsorted(
        ImportanceMethod::Mdi,
        entries,
        None,
        None,
        None,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PermutationConfig {
    pub metric: PermutationMetric,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for PermutationConfig {
    fn default() -> Self {
        PermutationConfig {
            metric: PermutationMetric::Accuracy,
            repeats: 10,
            seed: 0,
        }
    }
}

fn score_margins(metric: PermutationMetric, labels: &[Label], margins: &[f64]) -> Result<f64> {
    match metric {
        PermutationMetric::Accuracy => {
            let correct = margins
                .iter()
                .zip(labels)
                .filter(|(&m, &y)| Label::from_bool(sigmoid(m) >= 0.5) == y)
                .count();
            Ok(correct as f64 / labels.len() as f64)
        }
        PermutationMetric::Auc => {
            let p: Vec<f64> = margins.iter().map(|&m| sigmoid(m)).collect();
            auc_roc(labels, &p)
        }
    }
}

/// Mean drop of the metric when one column at a time is shuffled, over
/// `repeats` independent permutations. Each feature draws its permutations
/// from its own stream derived from `config.seed`, so results do not depend
/// on evaluation order or thread count, and a run with fewer repeats sees a
/// prefix of the same permutations.
///
/// Per-tree outputs are cached; only trees that split on the permuted feature
/// are re-evaluated. Margins are re-summed tree by tree in model order, so a
/// feature the model never uses scores exactly 0.
pub fn permutation_importance(
    model: &BoostedModel,
    matrix: &EncodedMatrix,
    labels: &[Label],
    config: &PermutationConfig,
) -> Result<ImportanceReport> {
    if matrix.n_cols() != model.n_features() {
        return Err(Error::ArityMismatch {
            expected: model.n_features(),
            actual: matrix.n_cols(),
        });
    }
    if labels.len() != matrix.n_rows() {
        return Err(Error::LengthMismatch(matrix.n_rows(), labels.len()));
    }
    if config.repeats == 0 {
        return Err(Error::InvalidArgument("permutation repeats must be at least 1".into()));
    }
    if matrix.n_rows() == 0 {
        return Err(Error::InvalidArgument("permutation importance needs rows".into()));
    }
    let n = matrix.n_rows();
    let cols = matrix.columns();
    let contrib: Vec<Vec<f64>> = model
        .trees
        .iter()
        .map(|t| (0..n).map(|i| t.predict_at(cols, i)).collect())
        .collect();
    let base = logit(model.base_score);
    let sum_margins = |replaced: &[Option<Vec<f64>>]| -> Vec<f64> {
        let mut m = vec![base; n];
        for (t, c) in contrib.iter().enumerate() {
            let c = replaced[t].as_deref().unwrap_or(c);
            for (mi, &ci) in m.iter_mut().zip(c) {
                *mi += model.eta * ci;
            }
        }
        m
    };
    let no_replacement: Vec<Option<Vec<f64>>> = vec![None; contrib.len()];
    let baseline = score_margins(config.metric, labels, &sum_margins(&no_replacement))?;

    let per_feature = (0..matrix.n_cols())
        .into_par_iter()
        .map(|j| -> Result<(f64, f64)> {
            let users: Vec<usize> = (0..model.trees.len())
                .filter(|&t| model.trees[t].uses_feature(j))
                .collect();
            if users.is_empty() {
                return Ok((0.0, 0.0));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(config.seed, &[j as u64]));
            let mut drops = Vec::with_capacity(config.repeats);
            let mut shuffled = cols[j].clone();
            for _ in 0..config.repeats {
                shuffled.copy_from_slice(&cols[j]);
                shuffled.shuffle(&mut rng);
                let mut replaced = no_replacement.clone();
                for &t in &users {
                    let tree = &model.trees[t];
                    replaced[t] = Some(
                        (0..n)
                            .map(|i| tree.predict_with(|f| if f == j { shuffled[i] } else { cols[f][i] }))
                            .collect(),
                    );
                }
                drops.push(baseline - score_margins(config.metric, labels, &sum_margins(&replaced))?);
            }
            let k = drops.len() as f64;
            let mean = drops.iter().sum::<f64>() / k;
            let var = drops.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / k;
            Ok((mean, var.sqrt()))
        })
        .collect::<Result<Vec<_>>>()?;

    let entries = matrix
        .names()
        .iter()
        .zip(per_feature)
        .map(|(name, (mean, std))| ImportanceEntry {
            name: name.clone(),
            score: mean,
            rank: 0,
            raw_gain: None,
            std: Some(std),
        })
        .collect();
    Ok(ImportanceReport::from_unsorted(
        ImportanceMethod::PermutationRaw,
        entries,
        Some(config.metric),
        Some(config.repeats),
        Some(baseline),
    ))
}

/// Everything produced by the decorrelated ranking, kept for plotting and
/// audit.
#[derive(Debug, Clone)]
pub struct DecorrelatedImportance {
    pub report: ImportanceReport,
    pub correlation: CorrelationMatrix,
    /// `None` when there was a single feature to cluster.
    pub linkage: Option<Linkage>,
    pub assignment: ClusterAssignment,
    /// Column indices (into the full matrix) the model was retrained on.
    pub representatives: Vec<usize>,
}

/// Spearman matrix of the training features → Ward linkage → cut at
/// `threshold` → one representative per cluster → retrain with `fit` on the
/// representatives → permutation importance on the test rows. The report
/// covers representatives only.
pub fn decorrelated_permutation_importance<F>(
    train: &EncodedMatrix,
    train_labels: &[Label],
    test: &EncodedMatrix,
    test_labels: &[Label],
    threshold: f64,
    config: &PermutationConfig,
    fit: F,
) -> Result<DecorrelatedImportance>
where
    F: FnOnce(&EncodedMatrix, &[Label]) -> Result<BoostedModel>,
{
    if train.names() != test.names() {
        return Err(Error::SchemaMismatch("train and test columns differ".into()));
    }
    let correlation = spearman_matrix(train)?;
    let (linkage, assignment) = if correlation.len() < 2 {
        let single = ClusterAssignment {
            cluster_of: vec![0; correlation.len()],
            n_clusters: correlation.len(),
            representatives: (0..correlation.len()).collect(),
        };
        (None, single)
    } else {
        let linkage = ward_cluster(&correlation)?;
        let assignment = select_representatives(&cut_clusters(&linkage, threshold), &correlation);
        (Some(linkage), assignment)
    };
    let representatives = assignment.sorted_representatives();
    let model = fit(&train.select_columns(&representatives), train_labels)?;
    let mut report = permutation_importance(&model, &test.select_columns(&representatives), test_labels, config)?;
    report.method = ImportanceMethod::PermutationDecorrelated;
    Ok(DecorrelatedImportance {
        report,
        correlation,
        linkage,
        assignment,
        representatives,
    })
}
