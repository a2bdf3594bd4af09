//! Confusion-matrix rates and rank-based AUC. Lawful is the positive class.

use crate::dataset::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    /// The same counts under the opposite class convention.
    pub fn transposed(&self) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tn,
            fn_: self.fp,
            fp: self.fn_,
            tn: self.tp,
        }
    }
}

pub fn confusion_matrix(actual: &[Label], predicted: &[Label]) -> Result<ConfusionMatrix> {
    if actual.len() != predicted.len() {
        return Err(Error::LengthMismatch(actual.len(), predicted.len()));
    }
    if actual.is_empty() {
        return Err(Error::EmptyConfusion);
    }
    let mut cm = ConfusionMatrix::default();
    for (&a, &p) in actual.iter().zip(predicted) {
        match (a, p) {
            (Label::Lawful, Label::Lawful) => cm.tp += 1,
            (Label::Lawful, Label::Unlawful) => cm.fn_ += 1,
            (Label::Unlawful, Label::Lawful) => cm.fp += 1,
            (Label::Unlawful, Label::Unlawful) => cm.tn += 1,
        }
    }
    Ok(cm)
}

/// Derived rates. A rate whose denominator is zero is `None`, never 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsReport {
    pub acc: Option<f64>,
    pub pre: Option<f64>,
    pub tpr: Option<f64>,
    pub tnr: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub auc: Option<f64>,
}

/// Metric identifiers in report row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Acc,
    Pre,
    Tpr,
    Fnr,
    Fpr,
    Tnr,
    Auc,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::Acc,
        Metric::Pre,
        Metric::Tpr,
        Metric::Fnr,
        Metric::Fpr,
        Metric::Tnr,
        Metric::Auc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Acc => "ACC",
            Metric::Pre => "PRE",
            Metric::Tpr => "TPR",
            Metric::Fnr => "FNR",
            Metric::Fpr => "FPR",
            Metric::Tnr => "TNR",
            Metric::Auc => "AUC",
        }
    }

    pub fn from_name(name: &str) -> Option<Metric> {
        Metric::ALL.into_iter().find(|m| m.name() == name)
    }
}

impl MetricsReport {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Acc => self.acc,
            Metric::Pre => self.pre,
            Metric::Tpr => self.tpr,
            Metric::Fnr => self.fnr,
            Metric::Fpr => self.fpr,
            Metric::Tnr => self.tnr,
            Metric::Auc => self.auc,
        }
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn derive_rates(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::EmptyConfusion);
    }
    Ok(MetricsReport {
        acc: ratio(cm.tp + cm.tn, n),
        pre: ratio(cm.tp, cm.tp + cm.fp),
        tpr: ratio(cm.tp, cm.tp + cm.fn_),
        tnr: ratio(cm.tn, cm.tn + cm.fp),
        fpr: ratio(cm.fp, cm.fp + cm.tn),
        fnr: ratio(cm.fn_, cm.fn_ + cm.tp),
        auc: None,
    })
}

/// Mann–Whitney AUC: the probability that a random lawful row outscores a
/// random unlawful row, ties counted as one half. Computed from average ranks.
pub fn auc_roc(actual: &[Label], scores: &[f64]) -> Result<f64> {
    if actual.len() != scores.len() {
        return Err(Error::LengthMismatch(actual.len(), scores.len()));
    }
    let n_pos = actual.iter().filter(|l| l.is_lawful()).count();
    let n_neg = actual.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of (doubled) ranks of the positives; doubling keeps tie averages
    // integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j, doubled average = i + 1 + j
        let avg2 = (i + 1 + j) as u128;
        let pos_in_group = order[i..j].iter().filter(|&&r| actual[r].is_lawful()).count() as u128;
        rank_sum2 += avg2 * pos_in_group;
        i = j;
    }
    let n_pos = n_pos as u128;
    let u2 = rank_sum2 - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}
