//! Regularized gradient-boosted trees for binary log loss.
//!
//! Each round fits a tree to the first and second derivatives of the loss at
//! the current margins. Leaf weights and split gains come from the
//! second-order expansion of the regularized objective
//! `Σ ℓ(y, ŷ) + Σ_k (γ·T_k + ½·λ·Σ_j w_kj²)`.

mod model;
mod tree;

pub use model::{
    evaluate_objective, logit, sigmoid, train, train_monitored, BoostedModel, EarlyStopping, TrainOutcome,
};
pub use tree::{build_tree, find_best_split, SortedColumns, SplitCandidate, Tree, TreeNode};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub ntrees: usize,
    pub eta: f64,
    pub max_depth: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub row_sample: f64,
    pub col_sample: f64,
    pub min_child_hessian: f64,
    pub base_score: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            ntrees: 100,
            eta: 0.3,
            max_depth: 6,
            gamma: 0.0,
            lambda: 1.0,
            row_sample: 1.0,
            col_sample: 1.0,
            min_child_hessian: 1e-6,
            base_score: 0.5,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("hyperparameter {what}")));
        if self.ntrees == 0 {
            return bad("ntrees must be positive");
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta must lie in (0, 1]");
        }
        if !(self.row_sample > 0.0 && self.row_sample <= 1.0) {
            return bad("row_sample must lie in (0, 1]");
        }
        if !(self.col_sample > 0.0 && self.col_sample <= 1.0) {
            return bad("col_sample must lie in (0, 1]");
        }
        if !(self.base_score > 0.0 && self.base_score < 1.0) {
            return bad("base_score must lie in (0, 1)");
        }
        if !(self.gamma >= 0.0 && self.lambda >= 0.0 && self.min_child_hessian >= 0.0) {
            return bad("gamma, lambda and min_child_hessian must be non-negative");
        }
        if !(self.gamma.is_finite() && self.lambda.is_finite()) {
            return bad("gamma and lambda must be finite");
        }
        Ok(())
    }
}

/// First and second derivative of the loss with respect to the margin.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradPair {
    pub g: f64,
    pub h: f64,
}

/// Gradient and hessian of binary log loss at `margin`.
/// `g = p - y`, `h = p(1 - p)` with `p = sigmoid(margin)`.
#[inline]
pub fn logloss_grad_hess(lawful: bool, margin: f64) -> GradPair {
    let p = sigmoid(margin);
    let y = if lawful { 1.0 } else { 0.0 };
    GradPair {
        g: p - y,
        h: p * (1.0 - p),
    }
}

/// Binary log loss of one row expressed through the margin,
/// `ln(1 + e^m) - y·m`, stable for large `|m|`.
#[inline]
pub fn logloss(lawful: bool, margin: f64) -> f64 {
    let softplus = if margin > 0.0 {
        margin + (-margin).exp().ln_1p()
    } else {
        margin.exp().ln_1p()
    };
    if lawful {
        softplus - margin
    } else {
        softplus
    }
}

/// Optimal leaf weight `-G / (H + λ)`.
pub fn leaf_weight(grad_sum: f64, hess_sum: f64, lambda: f64) -> Result<f64> {
    let den = hess_sum + lambda;
    if den == 0.0 {
        return Err(Error::ZeroCurvature);
    }
    Ok(-grad_sum / den)
}

/// Loss reduction of splitting a node into the given children, minus `γ`.
#[inline]
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64, gamma: f64) -> f64 {
    let score = |g: f64, h: f64| g * g / (h + lambda);
    0.5 * (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr)) - gamma
}
