//! Fit-on-train transforms: one-hot encoding, z-score normalization and PCA.
//!
//! Every `fit_*` reads only the rows it is given; the fitted values are then
//! applied unchanged to any other partition.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{Column, FeatureKind, RawTable};
use crate::error::{Error, Result};
use crate::textfmt::{self, f64_17, Records};

/// Dense column-major numeric matrix with one name per column.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMatrix {
    names: Vec<String>,
    n_rows: usize,
    columns: Vec<Vec<f64>>,
}

impl EncodedMatrix {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        let n_rows = columns.first().map_or(0, Vec::len);
        Self::with_rows(names, columns, n_rows)
    }

    /// Like [`EncodedMatrix::new`] but also valid for zero columns.
    pub fn with_rows(names: Vec<String>, columns: Vec<Vec<f64>>, n_rows: usize) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::ArityMismatch {
                expected: names.len(),
                actual: columns.len(),
            });
        }
        if let Some(bad) = columns.iter().position(|c| c.len() != n_rows) {
            return Err(Error::InvalidTable(format!(
                "column `{}` has {} rows, expected {n_rows}",
                names[bad],
                columns[bad].len()
            )));
        }
        Ok(EncodedMatrix { names, n_rows, columns })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> EncodedMatrix {
        EncodedMatrix {
            names: self.names.clone(),
            n_rows: rows.len(),
            columns: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&r| c[r]).collect())
                .collect(),
        }
    }

    pub fn select_columns(&self, cols: &[usize]) -> EncodedMatrix {
        EncodedMatrix {
            names: cols.iter().map(|&j| self.names[j].clone()).collect(),
            n_rows: self.n_rows,
            columns: cols.iter().map(|&j| self.columns[j].clone()).collect(),
        }
    }

    /// Copy with column `j` replaced.
    pub fn with_column(&self, j: usize, values: Vec<f64>) -> Result<EncodedMatrix> {
        if values.len() != self.n_rows {
            return Err(Error::LengthMismatch(self.n_rows, values.len()));
        }
        let mut out = self.clone();
        out.columns[j] = values;
        Ok(out)
    }

    fn hconcat(mut self, other: EncodedMatrix) -> EncodedMatrix {
        self.names.extend(other.names);
        self.columns.extend(other.columns);
        self
    }
}

/// Population mean and standard deviation per numeric column.
#[derive(Debug, Clone, PartialEq)]
pub struct ZScoreParams {
    pub columns: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Column count of the matrix the parameters were fitted on.
    pub n_cols: usize,
}

impl ZScoreParams {
    /// Columns whose fitted σ is zero; they are mapped to 0.
    pub fn constant_columns(&self) -> Vec<usize> {
        self.columns
            .iter()
            .zip(&self.std)
            .filter(|(_, &s)| s == 0.0)
            .map(|(&c, _)| c)
            .collect()
    }
}

pub fn fit_zscore(matrix: &EncodedMatrix, numeric_columns: &[usize]) -> Result<ZScoreParams> {
    let n = matrix.n_rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "z-score fit needs at least 2 rows, got {n}"
        )));
    }
    let mut mean = Vec::with_capacity(numeric_columns.len());
    let mut std = Vec::with_capacity(numeric_columns.len());
    for &c in numeric_columns {
        let col = matrix.column(c);
        let mu = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
        mean.push(mu);
        std.push(var.sqrt());
    }
    Ok(ZScoreParams {
        columns: numeric_columns.to_vec(),
        mean,
        std,
        n_cols: matrix.n_cols(),
    })
}

pub fn apply_zscore(matrix: &EncodedMatrix, params: &ZScoreParams) -> Result<EncodedMatrix> {
    if matrix.n_cols() != params.n_cols {
        return Err(Error::ArityMismatch {
            expected: params.n_cols,
            actual: matrix.n_cols(),
        });
    }
    let mut out = matrix.clone();
    for ((&c, &mu), &sigma) in params.columns.iter().zip(&params.mean).zip(&params.std) {
        for x in out.columns[c].iter_mut() {
            *x = if sigma == 0.0 { 0.0 } else { (*x - mu) / sigma };
        }
    }
    Ok(out)
}

/// Categories of each categorical feature, in first-seen order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHotDict {
    pub features: Vec<(String, Vec<String>)>,
}

impl OneHotDict {
    pub fn n_indicators(&self) -> usize {
        self.features.iter().map(|(_, c)| c.len()).sum()
    }
}

pub fn fit_onehot(table: &RawTable, rows: &[usize]) -> OneHotDict {
    let mut features = Vec::new();
    for (spec, col) in table.specs().iter().zip(table.columns()) {
        if let Column::Categorical(values) = col {
            let mut cats: Vec<String> = Vec::new();
            for &r in rows {
                if !cats.iter().any(|c| *c == values[r]) {
                    cats.push(values[r].clone());
                }
            }
            features.push((spec.name.clone(), cats));
        }
    }
    OneHotDict { features }
}

/// Encodes `rows` of `table`: numeric columns first (schema order, raw
/// values), then one indicator block per categorical feature. Categories not
/// in `dict` encode as an all-zero block.
pub fn apply_onehot(table: &RawTable, rows: &[usize], dict: &OneHotDict) -> Result<EncodedMatrix> {
    let mut names = Vec::new();
    let mut columns = Vec::new();
    for (spec, col) in table.specs().iter().zip(table.columns()) {
        if let Column::Numeric(values) = col {
            names.push(spec.name.clone());
            columns.push(rows.iter().map(|&r| values[r]).collect());
        }
    }
    let categorical: Vec<(&str, &Vec<String>)> = table
        .specs()
        .iter()
        .zip(table.columns())
        .filter_map(|(s, c)| match c {
            Column::Categorical(v) => Some((s.name.as_str(), v)),
            _ => None,
        })
        .collect();
    if categorical.len() != dict.features.len() || categorical.iter().zip(&dict.features).any(|((a, _), (b, _))| a != b)
    {
        return Err(Error::ArityMismatch {
            expected: dict.features.len(),
            actual: categorical.len(),
        });
    }
    for ((name, values), (_, cats)) in categorical.iter().zip(&dict.features) {
        let start = columns.len();
        for cat in cats {
            names.push(format!("{name}={cat}"));
            columns.push(vec![0.0; rows.len()]);
        }
        for (i, &r) in rows.iter().enumerate() {
            if let Some(k) = cats.iter().position(|c| *c == values[r]) {
                columns[start + k][i] = 1.0;
            }
        }
    }
    EncodedMatrix::with_rows(names, columns, rows.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `r` orthonormal loading vectors of length `m'`.
    pub components: Vec<Vec<f64>>,
    /// Explained-variance fraction of each retained component.
    pub explained: Vec<f64>,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }
}

/// PCA by SVD of the centered matrix. Keeps the fewest leading components
/// whose cumulative explained variance reaches `variance_target`; each
/// component is signed so its largest-magnitude loading is positive.
pub fn fit_pca(matrix: &EncodedMatrix, variance_target: f64) -> Result<PcaModel> {
    let n = matrix.n_rows();
    let m = matrix.n_cols();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 2 rows, got {n}")));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("PCA needs at least one column".into()));
    }
    if !(variance_target > 0.0 && variance_target <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "variance target {variance_target} outside (0, 1]"
        )));
    }
    let mean: Vec<f64> = matrix
        .columns()
        .iter()
        .map(|c| c.iter().sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, m, |i, j| matrix.column(j)[i] - mean[j]);
    let svd = nalgebra::linalg::SVD::new(centered, false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::InvalidArgument("SVD did not produce right singular vectors".into()))?;
    let s = svd.singular_values;

    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let total: f64 = s.iter().map(|x| x * x).sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("PCA input has zero variance".into()));
    }

    let mut components = Vec::new();
    let mut explained = Vec::new();
    let mut cumulative = 0.0;
    for &k in &order {
        let frac = s[k] * s[k] / total;
        let mut v: Vec<f64> = v_t.row(k).iter().copied().collect();
        let lead = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained.push(frac);
        cumulative += frac;
        if cumulative >= variance_target - 1e-12 {
            break;
        }
    }
    Ok(PcaModel {
        mean,
        components,
        explained,
    })
}

pub fn apply_pca(matrix: &EncodedMatrix, model: &PcaModel) -> Result<EncodedMatrix> {
    if matrix.n_cols() != model.mean.len() {
        return Err(Error::ArityMismatch {
            expected: model.mean.len(),
            actual: matrix.n_cols(),
        });
    }
    let n = matrix.n_rows();
    let mut columns = Vec::with_capacity(model.n_components());
    for comp in &model.components {
        let mut scores = vec![0.0; n];
        for (j, (&w, &mu)) in comp.iter().zip(&model.mean).enumerate() {
            for (s, &x) in scores.iter_mut().zip(matrix.column(j)) {
                *s += (x - mu) * w;
            }
        }
        columns.push(scores);
    }
    let names = (1..=model.n_components()).map(|k| format!("PC{k}")).collect();
    EncodedMatrix::with_rows(names, columns, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PcaMode {
    /// The model sees principal-component scores only.
    #[default]
    Replace,
    /// Component scores are appended to the normalized features.
    Augment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub pca: bool,
    pub variance_target: f64,
    pub pca_mode: PcaMode,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            pca: false,
            variance_target: 0.95,
            pca_mode: PcaMode::Replace,
        }
    }
}

/// One-hot dictionary, z-score parameters and optional PCA fitted together on
/// one training partition.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedPreprocessor {
    pub numeric_names: Vec<String>,
    pub onehot: OneHotDict,
    pub zscore: ZScoreParams,
    pub pca: Option<(PcaModel, PcaMode)>,
}

const TRANSFORMS_HEADER: &str = "insider-boost-transforms";

impl FittedPreprocessor {
    pub fn fit(table: &RawTable, rows: &[usize], config: &PreprocessConfig) -> Result<Self> {
        let onehot = fit_onehot(table, rows);
        let encoded = apply_onehot(table, rows, &onehot)?;
        let numeric_names: Vec<String> = table
            .specs()
            .iter()
            .filter(|s| s.kind == FeatureKind::Numeric)
            .map(|s| s.name.clone())
            .collect();
        let numeric: Vec<usize> = (0..numeric_names.len()).collect();
        let zscore = fit_zscore(&encoded, &numeric)?;
        let pca = if config.pca {
            let z = apply_zscore(&encoded, &zscore)?;
            Some((fit_pca(&z, config.variance_target)?, config.pca_mode))
        } else {
            None
        };
        Ok(FittedPreprocessor {
            numeric_names,
            onehot,
            zscore,
            pca,
        })
    }

    pub fn transform(&self, table: &RawTable, rows: &[usize]) -> Result<EncodedMatrix> {
        let numeric: Vec<&str> = table
            .specs()
            .iter()
            .filter(|s| s.kind == FeatureKind::Numeric)
            .map(|s| s.name.as_str())
            .collect();
        if numeric != self.numeric_names.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::SchemaMismatch(
                "numeric columns differ from the fitted transforms".into(),
            ));
        }
        let encoded = apply_onehot(table, rows, &self.onehot)?;
        let z = apply_zscore(&encoded, &self.zscore)?;
        match &self.pca {
            None => Ok(z),
            Some((model, PcaMode::Replace)) => apply_pca(&z, model),
            Some((model, PcaMode::Augment)) => {
                let pcs = apply_pca(&z, model)?;
                Ok(z.hconcat(pcs))
            }
        }
    }

    pub fn to_text(&self) -> String {
        use textfmt::escape_name as esc;
        let mut s = String::new();
        let _ = writeln!(s, "{TRANSFORMS_HEADER} 1");
        let _ = writeln!(s, "zscore {}", self.numeric_names.len());
        for (i, name) in self.numeric_names.iter().enumerate() {
            let _ = writeln!(
                s,
                "numeric {} {} {}",
                esc(name),
                f64_17(self.zscore.mean[i]),
                f64_17(self.zscore.std[i])
            );
        }
        let _ = writeln!(s, "onehot {}", self.onehot.features.len());
        for (name, cats) in &self.onehot.features {
            let _ = write!(s, "categorical {} {}", esc(name), cats.len());
            for c in cats {
                let _ = write!(s, " {}", esc(c));
            }
            s.push('\n');
        }
        match &self.pca {
            None => s.push_str("pca none 0 0\n"),
            Some((model, mode)) => {
                let mode = match mode {
                    PcaMode::Replace => "replace",
                    PcaMode::Augment => "augment",
                };
                let _ = writeln!(s, "pca {mode} {} {}", model.n_components(), model.mean.len());
                s.push_str("mean");
                for x in &model.mean {
                    let _ = write!(s, " {}", f64_17(*x));
                }
                s.push('\n');
                for (comp, frac) in model.components.iter().zip(&model.explained) {
                    let _ = write!(s, "component {}", f64_17(*frac));
                    for x in comp {
                        let _ = write!(s, " {}", f64_17(*x));
                    }
                    s.push('\n');
                }
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut rec = Records::new("transforms", text);
        let what = rec.what();
        let (line, t) = rec.expect(TRANSFORMS_HEADER, 1)?;
        if t[0] != "1" {
            return Err(Error::parse(what, line, "unsupported transforms version"));
        }
        let (line, t) = rec.expect("zscore", 1)?;
        let k = textfmt::parse_usize(what, line, t[0])?;
        let mut numeric_names = Vec::with_capacity(k);
        let mut mean = Vec::with_capacity(k);
        let mut std = Vec::with_capacity(k);
        for _ in 0..k {
            let (line, t) = rec.expect("numeric", 3)?;
            numeric_names.push(textfmt::unescape_name(t[0]));
            mean.push(textfmt::parse_f64(what, line, t[1])?);
            std.push(textfmt::parse_f64(what, line, t[2])?);
        }
        let (line, t) = rec.expect("onehot", 1)?;
        let k_cat = textfmt::parse_usize(what, line, t[0])?;
        let mut features = Vec::with_capacity(k_cat);
        for _ in 0..k_cat {
            let (line, t) = rec
                .next_record()
                .ok_or_else(|| Error::parse(what, 0, "truncated one-hot block"))?;
            if t.len() < 3 || t[0] != "categorical" {
                return Err(Error::parse(what, line, "expected `categorical`"));
            }
            let count = textfmt::parse_usize(what, line, t[2])?;
            if t.len() != 3 + count {
                return Err(Error::parse(what, line, "category count mismatch"));
            }
            features.push((
                textfmt::unescape_name(t[1]),
                t[3..].iter().map(|c| textfmt::unescape_name(c)).collect(),
            ));
        }
        let onehot = OneHotDict { features };
        let n_cols = numeric_names.len() + onehot.n_indicators();
        let (line, t) = rec.expect("pca", 3)?;
        let pca = match t[0] {
            "none" => None,
            mode @ ("replace" | "augment") => {
                let r = textfmt::parse_usize(what, line, t[1])?;
                let m = textfmt::parse_usize(what, line, t[2])?;
                if m != n_cols {
                    return Err(Error::parse(what, line, "PCA width does not match encoding"));
                }
                let (line, t) = rec.expect("mean", m)?;
                let mean = t
                    .iter()
                    .map(|x| textfmt::parse_f64(what, line, x))
                    .collect::<Result<Vec<_>>>()?;
                let mut components = Vec::with_capacity(r);
                let mut explained = Vec::with_capacity(r);
                for _ in 0..r {
                    let (line, t) = rec.expect("component", m + 1)?;
                    explained.push(textfmt::parse_f64(what, line, t[0])?);
                    components.push(
                        t[1..]
                            .iter()
                            .map(|x| textfmt::parse_f64(what, line, x))
                            .collect::<Result<Vec<_>>>()?,
                    );
                }
                let mode = if mode == "replace" {
                    PcaMode::Replace
                } else {
                    PcaMode::Augment
                };
                Some((
                    PcaModel {
                        mean,
                        components,
                        explained,
                    },
                    mode,
                ))
            }
            _ => return Err(Error::parse(what, line, "unknown PCA mode")),
        };
        rec.expect("end", 0)?;
        Ok(FittedPreprocessor {
            zscore: ZScoreParams {
                columns: (0..numeric_names.len()).collect(),
                mean,
                std,
                n_cols,
            },
            numeric_names,
            onehot,
            pca,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        textfmt::write_string(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&textfmt::read_to_string(path)?)
    }
}
