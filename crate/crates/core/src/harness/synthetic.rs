//! Planted-signal tabular generator used in place of private labeled data.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Column, FeatureKind, FeatureSpec, Label, RawTable};
use crate::error::{Error, Result};

/// Shape and signal strength of a generated table.
///
/// Numeric columns are laid out as: `informative` class-shifted features,
/// then `blocks` groups of `block_size` noisy copies (block `b` copies
/// informative feature `b`), then pure noise. Categorical columns follow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_rows: usize,
    pub numeric: usize,
    pub categorical: usize,
    pub cardinality: usize,
    pub informative: usize,
    pub blocks: usize,
    pub block_size: usize,
    /// σ of the noise added to each block copy.
    pub block_noise: f64,
    /// Distance between the class means of each informative feature, in
    /// units of its within-class σ.
    pub separation: f64,
    /// Log-odds tilt of categorical frequencies per unit of separation.
    pub categorical_signal: f64,
    /// Probability of flipping each label after generation.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_rows: 3984,
            numeric: 90,
            categorical: 20,
            cardinality: 4,
            informative: 10,
            blocks: 5,
            block_size: 4,
            block_noise: 0.3,
            separation: 1.4,
            categorical_signal: 0.25,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn n_features(&self) -> usize {
        self.numeric + self.categorical
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.n_rows < 4 {
            return fail(format!("n_rows must be at least 4, got {}", self.n_rows));
        }
        if self.n_features() == 0 {
            return fail("spec has no features".into());
        }
        if self.informative > self.numeric {
            return fail(format!(
                "{} informative features but only {} numeric",
                self.informative, self.numeric
            ));
        }
        if self.blocks > self.informative {
            return fail(format!(
                "{} correlated blocks need as many informative features, got {}",
                self.blocks, self.informative
            ));
        }
        if self.informative + self.blocks * self.block_size > self.numeric {
            return fail("informative features plus block copies exceed the numeric count".into());
        }
        if self.categorical > 0 && self.cardinality < 2 {
            return fail("categorical cardinality must be at least 2".into());
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return fail(format!(
                "separation must be finite and non-negative, got {}",
                self.separation
            ));
        }
        if !(self.block_noise >= 0.0 && self.categorical_signal >= 0.0) {
            return fail("noise and signal scales must be non-negative".into());
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return fail(format!("label noise {} outside [0, 0.5)", self.label_noise));
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Builds the table described by `spec`. Labels are balanced (lawful gets
/// `floor(n/2)` rows) before label noise.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<RawTable> {
    spec.validate()?;
    let n = spec.n_rows;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut truth: Vec<bool> = (0..n).map(|i| i < n / 2).collect();
    truth.shuffle(&mut rng);
    // centered class indicator: +½ lawful, −½ unlawful
    let y: Vec<f64> = truth.iter().map(|&t| if t { 0.5 } else { -0.5 }).collect();

    let mut specs = Vec::with_capacity(spec.n_features());
    let mut columns = Vec::with_capacity(spec.n_features());
    let copies_end = spec.informative + spec.blocks * spec.block_size;
    for j in 0..spec.numeric {
        let values: Vec<f64> = if j < spec.informative {
            y.iter().map(|&c| spec.separation * c + normal(&mut rng)).collect()
        } else if j < copies_end {
            let Column::Numeric(src) = &columns[(j - spec.informative) / spec.block_size] else {
                unreachable!("informative columns are numeric")
            };
            src.iter()
                .map(|&x: &f64| x + spec.block_noise * normal(&mut rng))
                .collect()
        } else {
            (0..n).map(|_| normal(&mut rng)).collect()
        };
        specs.push(FeatureSpec {
            name: format!("num_{j:03}"),
            kind: FeatureKind::Numeric,
            column_index: j,
        });
        columns.push(Column::Numeric(values));
    }

    let k = spec.cardinality;
    for c in 0..spec.categorical {
        // Category j gets log-odds tilt s_j ∈ [−1, 1] scaled by the class.
        // Alternate the direction per feature so categories do not all agree.
        let dir = if c % 2 == 0 { 1.0 } else { -1.0 };
        let tilt = spec.categorical_signal * spec.separation;
        let weights = |class: f64| -> Vec<f64> {
            (0..k)
                .map(|j| {
                    let s = if k > 1 {
                        2.0 * j as f64 / (k - 1) as f64 - 1.0
                    } else {
                        0.0
                    };
                    (dir * tilt * 2.0 * class * s).exp()
                })
                .collect()
        };
        let lawful = WeightedIndex::new(weights(0.5)).expect("positive weights");
        let unlawful = WeightedIndex::new(weights(-0.5)).expect("positive weights");
        let values = truth
            .iter()
            .map(|&t| {
                let j = if t {
                    lawful.sample(&mut rng)
                } else {
                    unlawful.sample(&mut rng)
                };
                format!("k{j}")
            })
            .collect();
        specs.push(FeatureSpec {
            name: format!("cat_{c:02}"),
            kind: FeatureKind::Categorical,
            column_index: spec.numeric + c,
        });
        columns.push(Column::Categorical(values));
    }

    let labels: Vec<Label> = truth
        .iter()
        .map(|&t| {
            let flip = spec.label_noise > 0.0 && rng.gen::<f64>() < spec.label_noise;
            Label::from_bool(t != flip)
        })
        .collect();
    RawTable::new(specs, columns, labels, "label")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_rows: 400,
            numeric: 12,
            categorical: 3,
            cardinality: 3,
            informative: 3,
            blocks: 2,
            block_size: 2,
            separation: 2.0,
            seed: 5,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic_and_shaped() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_rows(), 400);
        assert_eq!(a.n_features(), 15);
        assert_eq!(a.class_counts(), (200, 200));
        assert_eq!(a.specs()[12].name, "cat_00");
        let c = generate_synthetic(&SyntheticSpec { seed: 6, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn informative_means_are_shifted() {
        let t = generate_synthetic(&small()).unwrap();
        let Column::Numeric(x) = t.column(0) else { panic!() };
        let mean = |class: Label| {
            let rows = t.rows_of(class);
            rows.iter().map(|&r| x[r]).sum::<f64>() / rows.len() as f64
        };
        // 200 rows per class: standard error of the difference is 0.1
        let diff = mean(Label::Lawful) - mean(Label::Unlawful);
        assert!((diff - 2.0).abs() < 0.4, "{diff}");

        // block copy tracks its source closely
        let Column::Numeric(copy) = t.column(3) else { panic!() };
        let rms = (x.iter().zip(copy).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 400.0).sqrt();
        assert!(rms < 0.4, "{rms}");
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_synthetic(&SyntheticSpec {
            informative: 20,
            ..small()
        })
        .is_err());
        assert!(generate_synthetic(&SyntheticSpec {
            label_noise: 0.5,
            ..small()
        })
        .is_err());
        assert!(generate_synthetic(&SyntheticSpec {
            separation: -1.0,
            ..small()
        })
        .is_err());
        assert!(generate_synthetic(&SyntheticSpec { blocks: 4, ..small() }).is_err());
    }
}
