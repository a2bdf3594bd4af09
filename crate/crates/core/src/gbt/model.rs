use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tree::{build_tree, SortedColumns, Tree, TreeNode};
use super::{logloss, logloss_grad_hess, GradPair, Hyperparams};
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::metrics::auc_roc;
use crate::preprocess::EncodedMatrix;
use crate::textfmt::{self, f64_17, Records};

const MODEL_HEADER: &str = "insider-boost-model";
const MODEL_VERSION: usize = 1;

#[inline]
pub fn sigmoid(margin: f64) -> f64 {
    if margin >= 0.0 {
        1.0 / (1.0 + (-margin).exp())
    } else {
        let e = margin.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Additive tree ensemble. The margin of a row is `logit(base_score)` plus
/// `eta` times each tree's leaf weight, accumulated tree by tree in order.
#[derive(Debug, Clone, PartialEq)]
pub struct BoostedModel {
    pub base_score: f64,
    pub eta: f64,
    pub trees: Vec<Tree>,
    pub feature_names: Vec<String>,
}

impl BoostedModel {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    fn check_arity(&self, matrix: &EncodedMatrix) -> Result<()> {
        if matrix.n_cols() != self.n_features() {
            return Err(Error::ArityMismatch {
                expected: self.n_features(),
                actual: matrix.n_cols(),
            });
        }
        Ok(())
    }

    pub fn predict_margin(&self, matrix: &EncodedMatrix) -> Result<Vec<f64>> {
        self.check_arity(matrix)?;
        let base = logit(self.base_score);
        let mut margins = vec![base; matrix.n_rows()];
        for tree in &self.trees {
            for (i, m) in margins.iter_mut().enumerate() {
                *m += self.eta * tree.predict_at(matrix.columns(), i);
            }
        }
        Ok(margins)
    }

    pub fn predict_proba(&self, matrix: &EncodedMatrix) -> Result<Vec<f64>> {
        Ok(self.predict_margin(matrix)?.into_iter().map(sigmoid).collect())
    }

    /// Lawful when the predicted probability is at least `threshold`.
    pub fn classify(&self, matrix: &EncodedMatrix, threshold: f64) -> Result<Vec<Label>> {
        Ok(self
            .predict_proba(matrix)?
            .into_iter()
            .map(|p| Label::from_bool(p >= threshold))
            .collect())
    }

    /// Total recorded gain per feature.
    pub fn gain_totals(&self) -> Vec<f64> {
        let mut totals = vec![0.0; self.n_features()];
        for tree in &self.trees {
            for (f, g) in tree.split_gains() {
                totals[f] += g;
            }
        }
        totals
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MODEL_HEADER} {MODEL_VERSION}");
        let _ = writeln!(s, "base_score {}", f64_17(self.base_score));
        let _ = writeln!(s, "eta {}", f64_17(self.eta));
        let _ = writeln!(s, "features {}", self.feature_names.len());
        for name in &self.feature_names {
            let _ = writeln!(s, "feature {}", textfmt::escape_name(name));
        }
        let _ = writeln!(s, "trees {}", self.trees.len());
        for (k, tree) in self.trees.iter().enumerate() {
            let _ = writeln!(s, "tree {k} {}", tree.nodes().len());
            for node in tree.nodes() {
                match *node {
                    TreeNode::Split {
                        feature,
                        threshold,
                        left,
                        right,
                        gain,
                    } => {
                        let _ = writeln!(
                            s,
                            "split {feature} {} {left} {right} {}",
                            f64_17(threshold),
                            f64_17(gain)
                        );
                    }
                    TreeNode::Leaf { weight } => {
                        let _ = writeln!(s, "leaf {}", f64_17(weight));
                    }
                }
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str) -> Result<BoostedModel> {
        let mut rec = Records::new("model", text);
        let what = rec.what();
        let (line, head) = rec
            .next_record()
            .ok_or_else(|| Error::parse(what, 0, "empty model file"))?;
        if head.len() != 2 || head[0] != MODEL_HEADER {
            return Err(Error::parse(what, line, "missing model header"));
        }
        if textfmt::parse_usize(what, line, head[1])? != MODEL_VERSION {
            return Err(Error::parse(what, line, "unsupported model version"));
        }
        let (line, t) = rec.expect("base_score", 1)?;
        let base_score = textfmt::parse_f64(what, line, t[0])?;
        let (line, t) = rec.expect("eta", 1)?;
        let eta = textfmt::parse_f64(what, line, t[0])?;
        let (line, t) = rec.expect("features", 1)?;
        let m = textfmt::parse_usize(what, line, t[0])?;
        let mut feature_names = Vec::with_capacity(m);
        for _ in 0..m {
            let (_, t) = rec.expect("feature", 1)?;
            feature_names.push(textfmt::unescape_name(t[0]));
        }
        let (line, t) = rec.expect("trees", 1)?;
        let k = textfmt::parse_usize(what, line, t[0])?;
        let mut trees = Vec::with_capacity(k);
        for expected in 0..k {
            let (line, t) = rec.expect("tree", 2)?;
            if textfmt::parse_usize(what, line, t[0])? != expected {
                return Err(Error::parse(what, line, "trees out of order"));
            }
            let n_nodes = textfmt::parse_usize(what, line, t[1])?;
            let mut nodes = Vec::with_capacity(n_nodes);
            for _ in 0..n_nodes {
                let (line, t) = rec
                    .next_record()
                    .ok_or_else(|| Error::parse(what, 0, "truncated tree"))?;
                let node = match (t[0], t.len()) {
                    ("leaf", 2) => TreeNode::Leaf {
                        weight: textfmt::parse_f64(what, line, t[1])?,
                    },
                    ("split", 6) => {
                        let feature = textfmt::parse_usize(what, line, t[1])?;
                        if feature >= m {
                            return Err(Error::parse(what, line, "feature index out of range"));
                        }
                        TreeNode::Split {
                            feature,
                            threshold: textfmt::parse_f64(what, line, t[2])?,
                            left: textfmt::parse_usize(what, line, t[3])?,
                            right: textfmt::parse_usize(what, line, t[4])?,
                            gain: textfmt::parse_f64(what, line, t[5])?,
                        }
                    }
                    _ => return Err(Error::parse(what, line, "expected `leaf` or `split`")),
                };
                nodes.push(node);
            }
            let tree =
                Tree::from_nodes(nodes).ok_or_else(|| Error::parse(what, line, "inconsistent tree structure"))?;
            trees.push(tree);
        }
        rec.expect("end", 0)?;
        let model = BoostedModel {
            base_score,
            eta,
            trees,
            feature_names,
        };
        if !(model.base_score > 0.0 && model.base_score < 1.0 && model.eta > 0.0) {
            return Err(Error::parse(what, 0, "base_score or eta out of range"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        textfmt::write_string(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<BoostedModel> {
        BoostedModel::from_text(&textfmt::read_to_string(path)?)
    }
}

/// Validation-AUC monitor for early stopping. `patience: None` disables
/// stopping; the trace is still recorded.
#[derive(Debug, Clone, Copy)]
pub struct EarlyStopping<'a> {
    pub matrix: &'a EncodedMatrix,
    pub labels: &'a [Label],
    pub patience: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Truncated to `best_round` trees when a monitor was given.
    pub model: BoostedModel,
    /// Validation AUC after each round.
    pub auc_trace: Vec<f64>,
    /// Number of trees at the best validation AUC (first occurrence).
    pub best_round: usize,
    pub best_auc: Option<f64>,
    pub rounds_trained: usize,
}

pub fn train(matrix: &EncodedMatrix, labels: &[Label], params: &Hyperparams) -> Result<BoostedModel> {
    Ok(train_monitored(matrix, labels, params, None)?.model)
}

/// Boosting loop: per round compute gradient pairs at the current margins,
/// subsample rows (and, inside the tree builder, columns) without
/// replacement, grow a tree and add `eta` times its output to the margins.
pub fn train_monitored(
    matrix: &EncodedMatrix,
    labels: &[Label],
    params: &Hyperparams,
    monitor: Option<EarlyStopping<'_>>,
) -> Result<TrainOutcome> {
    params.validate()?;
    let n = matrix.n_rows();
    if labels.len() != n {
        return Err(Error::LengthMismatch(n, labels.len()));
    }
    if n < 2 {
        return Err(Error::InvalidTable(format!("need at least 2 training rows, got {n}")));
    }
    let lawful = labels.iter().filter(|l| l.is_lawful()).count();
    if lawful == 0 || lawful == n {
        return Err(Error::SingleClass);
    }
    if matrix.n_cols() == 0 {
        return Err(Error::ArityMismatch { expected: 1, actual: 0 });
    }
    if let Some(mon) = &monitor {
        if mon.matrix.n_cols() != matrix.n_cols() {
            return Err(Error::ArityMismatch {
                expected: matrix.n_cols(),
                actual: mon.matrix.n_cols(),
            });
        }
        if mon.labels.len() != mon.matrix.n_rows() {
            return Err(Error::LengthMismatch(mon.matrix.n_rows(), mon.labels.len()));
        }
    }

    let sorted = SortedColumns::new(matrix);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let base = logit(params.base_score);
    let mut margins = vec![base; n];
    let mut grads = vec![GradPair::default(); n];
    let all_rows: Vec<usize> = (0..n).collect();
    let n_sample = ((params.row_sample * n as f64).round() as usize).clamp(1, n);

    let mut val_margins = monitor
        .as_ref()
        .map(|m| vec![base; m.matrix.n_rows()])
        .unwrap_or_default();
    let mut val_proba = vec![0.0; val_margins.len()];
    let mut auc_trace = Vec::new();
    let mut best_auc: Option<f64> = None;
    let mut best_round = 0;

    let mut trees = Vec::with_capacity(params.ntrees);
    for round in 1..=params.ntrees {
        for ((gp, &m), &y) in grads.iter_mut().zip(&margins).zip(labels) {
            *gp = logloss_grad_hess(y.is_lawful(), m);
        }
        let rows: Vec<usize> = if n_sample == n {
            all_rows.clone()
        } else {
            let mut r = index::sample(&mut rng, n, n_sample).into_vec();
            r.sort_unstable();
            r
        };
        let tree = build_tree(matrix, &sorted, &rows, &grads, params, &mut rng);
        for (i, m) in margins.iter_mut().enumerate() {
            *m += params.eta * tree.predict_at(matrix.columns(), i);
        }

        if let Some(mon) = &monitor {
            for (i, (m, p)) in val_margins.iter_mut().zip(val_proba.iter_mut()).enumerate() {
                *m += params.eta * tree.predict_at(mon.matrix.columns(), i);
                *p = super::sigmoid(*m);
            }
            trees.push(tree);
            let auc = auc_roc(mon.labels, &val_proba)?;
            auc_trace.push(auc);
            if best_auc.is_none_or(|b| auc > b) {
                best_auc = Some(auc);
                best_round = round;
            } else if mon.patience.is_some_and(|p| round - best_round >= p) {
                break;
            }
        } else {
            trees.push(tree);
        }
    }

    let rounds_trained = trees.len();
    if monitor.is_some() {
        trees.truncate(best_round);
    } else {
        best_round = rounds_trained;
    }
    Ok(TrainOutcome {
        model: BoostedModel {
            base_score: params.base_score,
            eta: params.eta,
            trees,
            feature_names: matrix.names().to_vec(),
        },
        auc_trace,
        best_round,
        best_auc,
        rounds_trained,
    })
}

/// Regularized objective: summed log loss of the model's predictions plus
/// `γ·T_k + ½·λ·Σ w²` for every tree.
pub fn evaluate_objective(
    model: &BoostedModel,
    matrix: &EncodedMatrix,
    labels: &[Label],
    params: &Hyperparams,
) -> Result<f64> {
    let margins = model.predict_margin(matrix)?;
    if margins.len() != labels.len() {
        return Err(Error::LengthMismatch(margins.len(), labels.len()));
    }
    let loss: f64 = margins
        .iter()
        .zip(labels)
        .map(|(&m, &y)| logloss(y.is_lawful(), m))
        .sum();
    let penalty: f64 = model
        .trees
        .iter()
        .map(|t| {
            params.gamma * t.n_leaves() as f64 + 0.5 * params.lambda * t.leaf_weights().map(|w| w * w).sum::<f64>()
        })
        .sum();
    Ok(loss + penalty)
}
