//! Random hyperparameter search scored by stratified k-fold cross-validation
//! with validation-AUC early stopping.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Label, RawTable};
use crate::error::{Error, Result};
use crate::gbt::{train_monitored, EarlyStopping, Hyperparams};
use crate::preprocess::{EncodedMatrix, FittedPreprocessor, PreprocessConfig};
use crate::textfmt::f64_17;

/// Inclusive bounds for every tuned hyperparameter. `eta` is drawn
/// log-uniformly, the other reals uniformly, integers uniformly over the
/// integers in range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub ntrees: [usize; 2],
    pub eta: [f64; 2],
    pub max_depth: [usize; 2],
    pub gamma: [f64; 2],
    pub lambda: [f64; 2],
    pub row_sample: [f64; 2],
    pub col_sample: [f64; 2],
    /// Fixed, not searched.
    pub min_child_hessian: f64,
    /// Fixed, not searched.
    pub base_score: f64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            ntrees: [100, 600],
            eta: [0.01, 0.3],
            max_depth: [4, 20],
            gamma: [0.0, 5.0],
            lambda: [0.0, 10.0],
            row_sample: [0.5, 1.0],
            col_sample: [0.5, 1.0],
            min_child_hessian: Hyperparams::default().min_child_hessian,
            base_score: Hyperparams::default().base_score,
        }
    }
}

impl SearchSpace {
    /// Space containing only `params` (the seed is not part of a space).
    pub fn point(params: &Hyperparams) -> SearchSpace {
        SearchSpace {
            ntrees: [params.ntrees; 2],
            eta: [params.eta; 2],
            max_depth: [params.max_depth; 2],
            gamma: [params.gamma; 2],
            lambda: [params.lambda; 2],
            row_sample: [params.row_sample; 2],
            col_sample: [params.col_sample; 2],
            min_child_hessian: params.min_child_hessian,
            base_score: params.base_score,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str| Err(Error::InvalidArgument(format!("search range `{name}` is empty")));
        if self.ntrees[0] > self.ntrees[1] {
            return bad("ntrees");
        }
        if self.max_depth[0] > self.max_depth[1] {
            return bad("max_depth");
        }
        for (name, r) in [
            ("eta", self.eta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("row_sample", self.row_sample),
            ("col_sample", self.col_sample),
        ] {
            if matches!(r[0].partial_cmp(&r[1]), None | Some(std::cmp::Ordering::Greater)) {
                return bad(name);
            }
        }
        // Both corners must be valid hyperparameters.
        let corner = |pick: usize| Hyperparams {
            ntrees: self.ntrees[pick],
            eta: self.eta[pick],
            max_depth: self.max_depth[pick],
            gamma: self.gamma[pick],
            lambda: self.lambda[pick],
            row_sample: self.row_sample[pick],
            col_sample: self.col_sample[pick],
            min_child_hessian: self.min_child_hessian,
            base_score: self.base_score,
            seed: 0,
        };
        corner(0).validate()?;
        corner(1).validate()
    }
}

/// Cross-validation settings. `early_stop_patience = 0` disables stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
    pub tuning_iterations: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 5,
            tuning_iterations: 5,
            early_stop_patience: 20,
            seed: 0,
        }
    }
}

impl CvConfig {
    pub fn patience(&self) -> Option<usize> {
        (self.early_stop_patience > 0).then_some(self.early_stop_patience)
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 folds, got {}",
                self.folds
            )));
        }
        if self.tuning_iterations < 1 {
            return Err(Error::InvalidArgument("tuning_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Stratified fold assignment. Each class is shuffled and dealt round-robin,
/// so per-class fold sizes differ by at most one. Returns the validation
/// indices of every fold, ascending.
pub fn kfold_split(labels: &[Label], folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {folds}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Vec::new(); folds];
    let mut offset = 0;
    for (class, name) in [(Label::Unlawful, "unlawful"), (Label::Lawful, "lawful")] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&r| labels[r] == class).collect();
        if idx.len() < folds {
            return Err(Error::ClassTooSmall {
                class: name,
                count: idx.len(),
                needed: folds,
            });
        }
        idx.shuffle(&mut rng);
        for (k, r) in idx.iter().enumerate() {
            out[(offset + k) % folds].push(*r);
        }
        // Continue dealing where the previous class stopped so total fold
        // sizes stay balanced as well.
        offset = (offset + idx.len()) % folds;
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

fn draw_real(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

/// One independent draw per hyperparameter; the candidate's training seed is
/// drawn from the same stream.
pub fn draw_candidate(space: &SearchSpace, rng: &mut ChaCha8Rng) -> Hyperparams {
    let ntrees = rng.gen_range(space.ntrees[0]..=space.ntrees[1]);
    let eta = if space.eta[0] == space.eta[1] {
        space.eta[0]
    } else {
        rng.gen_range(space.eta[0].ln()..=space.eta[1].ln())
            .exp()
            .clamp(space.eta[0], space.eta[1])
    };
    let max_depth = rng.gen_range(space.max_depth[0]..=space.max_depth[1]);
    let gamma = draw_real(rng, space.gamma);
    let lambda = draw_real(rng, space.lambda);
    let row_sample = draw_real(rng, space.row_sample);
    let col_sample = draw_real(rng, space.col_sample);
    Hyperparams {
        ntrees,
        eta,
        max_depth,
        gamma,
        lambda,
        row_sample,
        col_sample,
        min_child_hessian: space.min_child_hessian,
        base_score: space.base_score,
        // 63 bits so the seed survives a round trip through TOML integers.
        seed: rng.gen::<u64>() >> 1,
    }
}

/// Encoded training and validation matrices of one fold. Preprocessing is
/// fitted on the fold's training rows only.
#[derive(Debug, Clone)]
pub struct PreparedFold {
    pub train: EncodedMatrix,
    pub train_labels: Vec<Label>,
    pub valid: EncodedMatrix,
    pub valid_labels: Vec<Label>,
}

/// Splits `rows` of `table` into stratified folds and encodes each one.
pub fn prepare_folds(
    table: &RawTable,
    rows: &[usize],
    cv: &CvConfig,
    preprocess: &PreprocessConfig,
) -> Result<Vec<PreparedFold>> {
    cv.validate()?;
    let labels: Vec<Label> = rows.iter().map(|&r| table.labels()[r]).collect();
    let folds = kfold_split(&labels, cv.folds, cv.seed)?;
    let mut in_fold = vec![usize::MAX; rows.len()];
    for (f, idx) in folds.iter().enumerate() {
        for &i in idx {
            in_fold[i] = f;
        }
    }
    (0..folds.len())
        .into_par_iter()
        .map(|f| {
            let train_rows: Vec<usize> = (0..rows.len()).filter(|&i| in_fold[i] != f).map(|i| rows[i]).collect();
            let valid_rows: Vec<usize> = folds[f].iter().map(|&i| rows[i]).collect();
            let fitted = FittedPreprocessor::fit(table, &train_rows, preprocess)?;
            Ok(PreparedFold {
                train: fitted.transform(table, &train_rows)?,
                train_labels: train_rows.iter().map(|&r| table.labels()[r]).collect(),
                valid: fitted.transform(table, &valid_rows)?,
                valid_labels: valid_rows.iter().map(|&r| table.labels()[r]).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    /// Best validation AUC reached.
    pub auc: f64,
    pub best_round: usize,
    pub rounds_trained: usize,
    pub auc_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub mean_auc: f64,
    /// Population standard deviation over folds.
    pub std_auc: f64,
    pub folds: Vec<FoldResult>,
}

impl CvResult {
    fn from_folds(folds: Vec<FoldResult>) -> CvResult {
        let k = folds.len() as f64;
        let mean_auc = folds.iter().map(|f| f.auc).sum::<f64>() / k;
        let var = folds.iter().map(|f| (f.auc - mean_auc).powi(2)).sum::<f64>() / k;
        CvResult {
            mean_auc,
            std_auc: var.sqrt(),
            folds,
        }
    }

    /// Median best round across folds, rounded up.
    pub fn median_best_round(&self) -> usize {
        let mut r: Vec<usize> = self.folds.iter().map(|f| f.best_round).collect();
        r.sort_unstable();
        let k = r.len();
        let m = if k % 2 == 1 {
            r[k / 2]
        } else {
            (r[k / 2 - 1] + r[k / 2]).div_ceil(2)
        };
        m.max(1)
    }
}

fn run_fold(fold: &PreparedFold, candidate: &Hyperparams, patience: Option<usize>) -> Result<FoldResult> {
    let out = train_monitored(
        &fold.train,
        &fold.train_labels,
        candidate,
        Some(EarlyStopping {
            matrix: &fold.valid,
            labels: &fold.valid_labels,
            patience,
        }),
    )?;
    Ok(FoldResult {
        auc: out.best_auc.unwrap_or(0.5),
        best_round: out.best_round,
        rounds_trained: out.rounds_trained,
        auc_trace: out.auc_trace,
    })
}

pub fn cross_validate_prepared(
    folds: &[PreparedFold],
    candidate: &Hyperparams,
    patience: Option<usize>,
) -> Result<CvResult> {
    let results = folds
        .par_iter()
        .map(|f| run_fold(f, candidate, patience))
        .collect::<Result<Vec<_>>>()?;
    Ok(CvResult::from_folds(results))
}

/// Cross-validates one candidate over every row of `table`.
pub fn cross_validate(
    table: &RawTable,
    candidate: &Hyperparams,
    cv: &CvConfig,
    preprocess: &PreprocessConfig,
) -> Result<CvResult> {
    let rows: Vec<usize> = (0..table.n_rows()).collect();
    let folds = prepare_folds(table, &rows, cv, preprocess)?;
    cross_validate_prepared(&folds, candidate, cv.patience())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateResult {
    pub params: Hyperparams,
    pub cv: CvResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningResult {
    pub candidates: Vec<CandidateResult>,
    pub best_index: usize,
}

impl TuningResult {
    pub fn best(&self) -> &CandidateResult {
        &self.candidates[self.best_index]
    }

    /// Best candidate's settings with `ntrees` replaced by the median best
    /// round across its folds (rounded up), for the refit on all training
    /// rows.
    pub fn final_params(&self) -> Hyperparams {
        let best = self.best();
        Hyperparams {
            ntrees: best.cv.median_best_round(),
            ..best.params
        }
    }

    /// Plain-text audit trail: every candidate, its fold AUCs, best rounds
    /// and validation traces.
    pub fn audit_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "tuning candidates {}", self.candidates.len());
        for (i, c) in self.candidates.iter().enumerate() {
            let p = &c.params;
            let _ = writeln!(
                s,
                "candidate {i} mean_auc {} std_auc {}",
                f64_17(c.cv.mean_auc),
                f64_17(c.cv.std_auc)
            );
            let _ = writeln!(
                s,
                "  params ntrees {} eta {} max_depth {} gamma {} lambda {} row_sample {} col_sample {} min_child_hessian {} base_score {} seed {}",
                p.ntrees,
                f64_17(p.eta),
                p.max_depth,
                f64_17(p.gamma),
                f64_17(p.lambda),
                f64_17(p.row_sample),
                f64_17(p.col_sample),
                f64_17(p.min_child_hessian),
                f64_17(p.base_score),
                p.seed
            );
            for (k, f) in c.cv.folds.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "  fold {k} auc {} best_round {} rounds_trained {}",
                    f64_17(f.auc),
                    f.best_round,
                    f.rounds_trained
                );
                s.push_str("    trace");
                for a in &f.auc_trace {
                    let _ = write!(s, " {}", f64_17(*a));
                }
                s.push('\n');
            }
        }
        let fp = self.final_params();
        let _ = writeln!(s, "best {}", self.best_index);
        let _ = writeln!(s, "refit_ntrees {}", fp.ntrees);
        s
    }
}

/// Index of the best candidate: highest mean AUC, then fewer trees, then
/// shallower depth, then earliest draw.
pub fn select_best(candidates: &[CandidateResult]) -> usize {
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let b = &candidates[best];
        let better = c.cv.mean_auc > b.cv.mean_auc
            || (c.cv.mean_auc == b.cv.mean_auc
                && (c.params.ntrees, c.params.max_depth) < (b.params.ntrees, b.params.max_depth));
        if better {
            best = i;
        }
    }
    best
}

/// Random search over already prepared folds. Candidates are drawn serially
/// from `cv.seed`; the candidate × fold fits run in parallel and are
/// collected in order, so the result does not depend on the thread count.
pub fn random_search_prepared(folds: &[PreparedFold], space: &SearchSpace, cv: &CvConfig) -> Result<TuningResult> {
    space.validate()?;
    cv.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cv.seed);
    let params: Vec<Hyperparams> = (0..cv.tuning_iterations)
        .map(|_| draw_candidate(space, &mut rng))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..params.len())
        .flat_map(|c| (0..folds.len()).map(move |f| (c, f)))
        .collect();
    let patience = cv.patience();
    let fold_results = jobs
        .par_iter()
        .map(|&(c, f)| run_fold(&folds[f], &params[c], patience))
        .collect::<Result<Vec<_>>>()?;
    let mut it = fold_results.into_iter();
    let candidates: Vec<CandidateResult> = params
        .into_iter()
        .map(|p| CandidateResult {
            params: p,
            cv: CvResult::from_folds(it.by_ref().take(folds.len()).collect()),
        })
        .collect();
    let best_index = select_best(&candidates);
    Ok(TuningResult { candidates, best_index })
}

/// Random search over every row of `table`.
pub fn random_search(
    table: &RawTable,
    space: &SearchSpace,
    cv: &CvConfig,
    preprocess: &PreprocessConfig,
) -> Result<TuningResult> {
    let rows: Vec<usize> = (0..table.n_rows()).collect();
    let folds = prepare_folds(table, &rows, cv, preprocess)?;
    random_search_prepared(&folds, space, cv)
}
