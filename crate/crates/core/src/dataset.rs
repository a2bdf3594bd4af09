//! Labeled transaction tables: CSV ingestion, balanced resampling and the
//! stratified train/test split.

use std::collections::HashSet;
use std::fs::File;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textfmt::{f64_17, read_to_string};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    /// Position of the column in the source file.
    pub column_index: usize,
}

/// Class label. Lawful transactions are the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Unlawful = 0,
    Lawful = 1,
}

impl Label {
    pub fn from_bool(lawful: bool) -> Self {
        if lawful {
            Label::Lawful
        } else {
            Label::Unlawful
        }
    }

    pub fn is_lawful(self) -> bool {
        self == Label::Lawful
    }

    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Lawful => Label::Unlawful,
            Label::Unlawful => Label::Lawful,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(rows.iter().map(|&r| v[r]).collect()),
            Column::Categorical(v) => Column::Categorical(rows.iter().map(|&r| v[r].clone()).collect()),
        }
    }
}

/// Column-major table of mixed numeric/categorical features with one binary
/// label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    specs: Vec<FeatureSpec>,
    columns: Vec<Column>,
    labels: Vec<Label>,
    label_name: String,
}

impl RawTable {
    pub fn new(
        specs: Vec<FeatureSpec>,
        columns: Vec<Column>,
        labels: Vec<Label>,
        label_name: impl Into<String>,
    ) -> Result<Self> {
        let table = RawTable {
            specs,
            columns,
            labels,
            label_name: label_name.into(),
        };
        table.check_shape()?;
        if table.n_rows() < 2 {
            return Err(Error::InvalidTable(format!(
                "need at least 2 rows, got {}",
                table.n_rows()
            )));
        }
        let (lawful, unlawful) = table.class_counts();
        if lawful == 0 || unlawful == 0 {
            return Err(Error::SingleClass);
        }
        Ok(table)
    }

    fn check_shape(&self) -> Result<()> {
        if self.specs.len() != self.columns.len() {
            return Err(Error::InvalidTable(format!(
                "{} specs for {} columns",
                self.specs.len(),
                self.columns.len()
            )));
        }
        let mut seen = HashSet::new();
        for (spec, col) in self.specs.iter().zip(&self.columns) {
            if !seen.insert(spec.name.as_str()) || spec.name == self.label_name {
                return Err(Error::InvalidTable(format!("duplicate column name `{}`", spec.name)));
            }
            let kind_ok = matches!(
                (spec.kind, col),
                (FeatureKind::Numeric, Column::Numeric(_)) | (FeatureKind::Categorical, Column::Categorical(_))
            );
            if !kind_ok {
                return Err(Error::InvalidTable(format!(
                    "column `{}` does not match its declared kind",
                    spec.name
                )));
            }
            if col.len() != self.labels.len() {
                return Err(Error::InvalidTable(format!(
                    "column `{}` has {} cells for {} labels",
                    spec.name,
                    col.len(),
                    self.labels.len()
                )));
            }
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.specs.len()
    }

    pub fn specs(&self) -> &[FeatureSpec] {
        &self.specs
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, index: usize) -> &Column {
        &self.columns[index]
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn label_name(&self) -> &str {
        &self.label_name
    }

    /// `(lawful, unlawful)` row counts.
    pub fn class_counts(&self) -> (usize, usize) {
        let lawful = self.labels.iter().filter(|l| l.is_lawful()).count();
        (lawful, self.labels.len() - lawful)
    }

    /// Row indices belonging to `class`, ascending.
    pub fn rows_of(&self, class: Label) -> Vec<usize> {
        (0..self.n_rows()).filter(|&r| self.labels[r] == class).collect()
    }

    /// Gathers `rows` (in the given order) into a new table. The result is not
    /// required to contain both classes.
    pub fn select(&self, rows: &[usize]) -> RawTable {
        RawTable {
            specs: self.specs.clone(),
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            label_name: self.label_name.clone(),
        }
    }

    /// Keeps the first `count` features in schema order.
    pub fn first_features(&self, count: usize) -> Result<RawTable> {
        if count == 0 || count > self.n_features() {
            return Err(Error::InvalidArgument(format!(
                "feature subset of {count} out of {} features",
                self.n_features()
            )));
        }
        self.select_features(&(0..count).collect::<Vec<_>>())
    }

    /// Keeps the listed features, in the given order.
    pub fn select_features(&self, features: &[usize]) -> Result<RawTable> {
        if features.is_empty() {
            return Err(Error::InvalidArgument("empty feature subset".into()));
        }
        if let Some(&bad) = features.iter().find(|&&f| f >= self.n_features()) {
            return Err(Error::InvalidArgument(format!(
                "feature index {bad} out of {} features",
                self.n_features()
            )));
        }
        let mut seen = vec![false; self.n_features()];
        for &f in features {
            if std::mem::replace(&mut seen[f], true) {
                return Err(Error::InvalidArgument(format!("feature index {f} listed twice")));
            }
        }
        Ok(RawTable {
            specs: features
                .iter()
                .enumerate()
                .map(|(i, &f)| FeatureSpec {
                    column_index: i,
                    ..self.specs[f].clone()
                })
                .collect(),
            columns: features.iter().map(|&f| self.columns[f].clone()).collect(),
            labels: self.labels.clone(),
            label_name: self.label_name.clone(),
        })
    }

    /// Replaces the labels, keeping features intact.
    pub fn with_labels(&self, labels: Vec<Label>) -> Result<RawTable> {
        RawTable::new(
            self.specs.clone(),
            self.columns.clone(),
            labels,
            self.label_name.clone(),
        )
    }

    /// Schema describing this table's columns.
    pub fn schema(&self) -> Schema {
        Schema {
            label_column: self.label_name.clone(),
            positive_label: default_positive(),
            negative_label: default_negative(),
            columns: self
                .specs
                .iter()
                .map(|s| SchemaColumn {
                    name: s.name.clone(),
                    kind: s.kind,
                })
                .collect(),
        }
    }

    /// Writes the table as CSV: features in schema order followed by the label
    /// column, numbers at 17 significant digits.
    pub fn write_csv(&self, path: &Path, schema: &Schema) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::InvalidArgument(format!("{other:?}")),
        })?;
        let mut header: Vec<&str> = self.specs.iter().map(|s| s.name.as_str()).collect();
        header.push(&self.label_name);
        writer.write_record(&header)?;
        let mut record: Vec<String> = Vec::with_capacity(header.len());
        for r in 0..self.n_rows() {
            record.clear();
            for col in &self.columns {
                record.push(match col {
                    Column::Numeric(v) => f64_17(v[r]),
                    Column::Categorical(v) => v[r].clone(),
                });
            }
            record.push(match self.labels[r] {
                Label::Lawful => schema.positive_label.clone(),
                Label::Unlawful => schema.negative_label.clone(),
            });
            writer.write_record(&record)?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn default_positive() -> String {
    "lawful".to_string()
}

fn default_negative() -> String {
    "unlawful".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaColumn {
    pub name: String,
    pub kind: FeatureKind,
}

/// Schema sidecar: one entry per feature column plus the label column name
/// and the two accepted label spellings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub label_column: String,
    #[serde(default = "default_positive")]
    pub positive_label: String,
    #[serde(default = "default_negative")]
    pub negative_label: String,
    pub columns: Vec<SchemaColumn>,
}

impl Schema {
    pub fn load(path: &Path) -> Result<Schema> {
        let text = read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        crate::textfmt::write_string(path, &text)
    }

    fn parse_label(&self, row: usize, value: &str) -> Result<Label> {
        if value == self.positive_label {
            Ok(Label::Lawful)
        } else if value == self.negative_label {
            Ok(Label::Unlawful)
        } else {
            Err(Error::UnknownLabel {
                row,
                value: value.to_string(),
            })
        }
    }
}

/// Loads a headered, comma-separated UTF-8 file. Rows are numbered from 1
/// (the header is row 0) in error messages.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<RawTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();

    let label_pos = header
        .iter()
        .position(|h| *h == schema.label_column)
        .ok_or_else(|| Error::SchemaMismatch(format!("label column `{}` not in header", schema.label_column)))?;
    let mut specs = Vec::with_capacity(schema.columns.len());
    for col in &schema.columns {
        let pos = header
            .iter()
            .position(|h| *h == col.name)
            .ok_or_else(|| Error::SchemaMismatch(format!("column `{}` not in header", col.name)))?;
        specs.push(FeatureSpec {
            name: col.name.clone(),
            kind: col.kind,
            column_index: pos,
        });
    }
    if header.len() != schema.columns.len() + 1 {
        let known: HashSet<&str> = schema
            .columns
            .iter()
            .map(|c| c.name.as_str())
            .chain(std::iter::once(schema.label_column.as_str()))
            .collect();
        let extra: Vec<&str> = header
            .iter()
            .map(String::as_str)
            .filter(|h| !known.contains(h))
            .collect();
        return Err(Error::SchemaMismatch(format!(
            "header has {} columns, schema describes {} (unexpected: {:?})",
            header.len(),
            schema.columns.len() + 1,
            extra
        )));
    }

    let mut columns: Vec<Column> = specs
        .iter()
        .map(|s| match s.kind {
            FeatureKind::Numeric => Column::Numeric(Vec::new()),
            FeatureKind::Categorical => Column::Categorical(Vec::new()),
        })
        .collect();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        for (spec, column) in specs.iter().zip(columns.iter_mut()) {
            let cell = &record[spec.column_index];
            if cell.trim().is_empty() {
                return Err(Error::MissingValue {
                    row,
                    column: spec.name.clone(),
                });
            }
            match column {
                Column::Numeric(v) => {
                    let x = cell.trim().parse::<f64>().ok().filter(|x| x.is_finite());
                    v.push(x.ok_or_else(|| Error::BadNumber {
                        row,
                        column: spec.name.clone(),
                        value: cell.to_string(),
                    })?);
                }
                Column::Categorical(v) => v.push(cell.to_string()),
            }
        }
        let label = &record[label_pos];
        if label.trim().is_empty() {
            return Err(Error::MissingValue {
                row,
                column: schema.label_column.clone(),
            });
        }
        labels.push(schema.parse_label(row, label)?);
    }

    // Features are stored in schema order; `column_index` keeps the file position.
    RawTable::new(specs, columns, labels, schema.label_column.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BalanceStatus {
    Balanced,
    /// Fewer lawful than unlawful rows; the table was returned unchanged.
    MajorityTooSmall,
}

#[derive(Debug, Clone)]
pub struct BalancedSample {
    pub table: RawTable,
    /// Source row of each output row.
    pub source_rows: Vec<usize>,
    pub status: BalanceStatus,
}

/// Keeps every unlawful row and draws an equal number of lawful rows without
/// replacement. Output order: unlawful rows, then the sampled lawful rows,
/// each in ascending source order.
pub fn sample_balanced(table: &RawTable, ratio: f64, seed: u64) -> Result<BalancedSample> {
    if ratio != 0.5 {
        return Err(Error::InvalidArgument(format!(
            "balance ratio {ratio} unsupported (only 0.5)"
        )));
    }
    let minority = table.rows_of(Label::Unlawful);
    let mut majority = table.rows_of(Label::Lawful);
    if minority.is_empty() {
        return Err(Error::ClassTooSmall {
            class: "unlawful",
            count: 0,
            needed: 1,
        });
    }
    if majority.len() < minority.len() {
        return Ok(BalancedSample {
            table: table.clone(),
            source_rows: (0..table.n_rows()).collect(),
            status: BalanceStatus::MajorityTooSmall,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (picked, _) = majority.partial_shuffle(&mut rng, minority.len());
    let mut picked = picked.to_vec();
    picked.sort_unstable();

    let mut rows = minority;
    rows.extend(picked);
    Ok(BalancedSample {
        table: table.select(&rows),
        source_rows: rows,
        status: BalanceStatus::Balanced,
    })
}

/// Draws `per_class` rows of each class. Unlawful rows come from
/// `unlawful_seed`, lawful rows from `lawful_seed`, so the unlawful subset can
/// be held fixed while lawful rows are resampled. Also returns the picked
/// row indices of `table`.
pub fn sample_per_class(
    table: &RawTable,
    per_class: usize,
    unlawful_seed: u64,
    lawful_seed: u64,
) -> Result<(RawTable, Vec<usize>)> {
    let mut rows = Vec::with_capacity(2 * per_class);
    for (class, seed, name) in [
        (Label::Unlawful, unlawful_seed, "unlawful"),
        (Label::Lawful, lawful_seed, "lawful"),
    ] {
        let mut idx = table.rows_of(class);
        if idx.len() < per_class {
            return Err(Error::ClassTooSmall {
                class: name,
                count: idx.len(),
                needed: per_class,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (picked, _) = idx.partial_shuffle(&mut rng, per_class);
        let mut picked = picked.to_vec();
        picked.sort_unstable();
        rows.extend(picked);
    }
    Ok((table.select(&rows), rows))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split: each class is shuffled independently and the first
/// `floor(count * train_fraction)` rows go to training. Both index lists are
/// returned ascending.
pub fn split_deterministic(labels: &[Label], train_fraction: f64, seed: u64) -> Result<SplitIndices> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, name) in [(Label::Unlawful, "unlawful"), (Label::Lawful, "lawful")] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&r| labels[r] == class).collect();
        if idx.len() < 2 {
            return Err(Error::ClassTooSmall {
                class: name,
                count: idx.len(),
                needed: 2,
            });
        }
        idx.shuffle(&mut rng);
        let cut = (idx.len() as f64 * train_fraction).floor() as usize;
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test })
}
