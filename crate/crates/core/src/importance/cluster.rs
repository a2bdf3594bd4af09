//! Spearman correlation, Ward agglomerative clustering on `1 − |ρ|` and
//! representative selection.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::preprocess::EncodedMatrix;
use crate::textfmt::f64_17;

/// Symmetric Spearman correlation matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    values: Vec<f64>,
    /// Columns with zero rank variance; their off-diagonal ρ is 0.
    pub constant: Vec<bool>,
}

impl CorrelationMatrix {
    /// Builds from a full row-major matrix, checking symmetry, unit diagonal
    /// and range.
    pub fn from_rows(names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = names.len();
        if rows.len() != m || rows.iter().any(|r| r.len() != m) {
            return Err(Error::InvalidArgument("correlation matrix must be square".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row[i] != 1.0 {
                return Err(Error::InvalidArgument(format!("diagonal entry {i} is not 1")));
            }
            for (j, &v) in row.iter().enumerate() {
                if !(-1.0..=1.0).contains(&v) || v != rows[j][i] {
                    return Err(Error::InvalidArgument(format!(
                        "entry ({i}, {j}) is out of range or asymmetric"
                    )));
                }
            }
        }
        Ok(CorrelationMatrix {
            names,
            values: rows.into_iter().flatten().collect(),
            constant: vec![false; m],
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }

    /// Long-format CSV (`row,column,rho`) for heatmaps.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,column,rho\n");
        for i in 0..self.len() {
            for j in 0..self.len() {
                let _ = writeln!(
                    s,
                    "{},{},{}",
                    csv_field(&self.names[i]),
                    csv_field(&self.names[j]),
                    f64_17(self.get(i, j))
                );
            }
        }
        s
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// 1-based fractional ranks; tied values share the average of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &r in &order[i..j] {
            ranks[r] = avg;
        }
        i = j;
    }
    ranks
}

/// Spearman ρ of every column pair: average ranks, then Pearson correlation
/// of the ranks.
pub fn spearman_matrix(matrix: &EncodedMatrix) -> Result<CorrelationMatrix> {
    let n = matrix.n_rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "Spearman needs at least 2 rows, got {n}"
        )));
    }
    let m = matrix.n_cols();
    let centered: Vec<Vec<f64>> = matrix
        .columns()
        .iter()
        .map(|c| {
            let r = average_ranks(c);
            let mean = r.iter().sum::<f64>() / n as f64;
            r.into_iter().map(|x| x - mean).collect()
        })
        .collect();
    let ss: Vec<f64> = centered.iter().map(|c| c.iter().map(|x| x * x).sum()).collect();
    let constant: Vec<bool> = ss.iter().map(|&s| s == 0.0).collect();
    let mut values = vec![0.0; m * m];
    for i in 0..m {
        values[i * m + i] = 1.0;
        for j in i + 1..m {
            let rho = if constant[i] || constant[j] {
                0.0
            } else {
                let cov: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
                (cov / (ss[i] * ss[j]).sqrt()).clamp(-1.0, 1.0)
            };
            values[i * m + j] = rho;
            values[j * m + i] = rho;
        }
    }
    Ok(CorrelationMatrix {
        names: matrix.names().to_vec(),
        values,
        constant,
    })
}

/// One agglomeration step. Leaves are ids `0..m`; the cluster formed at
/// step `k` gets id `m + k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linkage {
    pub n_leaves: usize,
    pub merges: Vec<Merge>,
}

impl Linkage {
    /// CSV with one row per merge, in the usual dendrogram-input layout.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,cluster_a,cluster_b,distance,size\n");
        for (k, m) in self.merges.iter().enumerate() {
            let _ = writeln!(s, "{k},{},{},{},{}", m.a, m.b, f64_17(m.distance), m.size);
        }
        s
    }
}

/// Ward agglomerative clustering on `d = 1 − |ρ|` using the Lance–Williams
/// recurrence on squared distances. Merge heights follow the common
/// convention where two singletons merge at their base distance. Ties go to
/// the lexicographically smallest `(id, id)` pair.
pub fn ward_cluster(corr: &CorrelationMatrix) -> Result<Linkage> {
    let m = corr.len();
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "clustering needs at least 2 features, got {m}"
        )));
    }
    let mut d2 = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            if i != j {
                let d = 1.0 - corr.get(i, j).abs();
                d2[i * m + j] = d * d;
            }
        }
    }
    let mut id: Vec<usize> = (0..m).collect();
    let mut size = vec![1usize; m];
    let mut active: Vec<usize> = (0..m).collect();
    let mut merges = Vec::with_capacity(m - 1);
    let mut last = 0.0f64;

    for step in 0..m - 1 {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for (x, &i) in active.iter().enumerate() {
            for &j in &active[x + 1..] {
                let v = d2[i * m + j];
                let key = (id[i].min(id[j]), id[i].max(id[j]));
                let better = match best {
                    None => true,
                    Some((bv, _, _, ka, kb)) => v < bv || (v == bv && key < (ka, kb)),
                };
                if better {
                    best = Some((v, i, j, key.0, key.1));
                }
            }
        }
        let (v, i, j, a, b) = best.expect("at least two active clusters");
        let (si, sj) = (size[i] as f64, size[j] as f64);
        for &k in &active {
            if k == i || k == j {
                continue;
            }
            let sk = size[k] as f64;
            let upd = ((si + sk) * d2[i * m + k] + (sj + sk) * d2[j * m + k] - sk * v) / (si + sj + sk);
            let upd = upd.max(0.0);
            d2[i * m + k] = upd;
            d2[k * m + i] = upd;
        }
        // Ward heights never decrease; max() only absorbs rounding.
        let distance = v.max(0.0).sqrt().max(last);
        last = distance;
        size[i] += size[j];
        id[i] = m + step;
        active.retain(|&k| k != j);
        merges.push(Merge {
            a,
            b,
            distance,
            size: size[i],
        });
    }
    Ok(Linkage { n_leaves: m, merges })
}

/// Feature → cluster map, plus one representative per cluster once
/// [`select_representatives`] has run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    /// Cluster id of every feature; ids are numbered by first member.
    pub cluster_of: Vec<usize>,
    pub n_clusters: usize,
    /// Feature index representing each cluster.
    pub representatives: Vec<usize>,
}

impl ClusterAssignment {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.cluster_of.len())
            .filter(|&f| self.cluster_of[f] == cluster)
            .collect()
    }

    /// Representatives in ascending feature order.
    pub fn sorted_representatives(&self) -> Vec<usize> {
        let mut r = self.representatives.clone();
        r.sort_unstable();
        r
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Connected components of the merges whose distance is below `threshold`.
pub fn cut_clusters(linkage: &Linkage, threshold: f64) -> ClusterAssignment {
    let m = linkage.n_leaves;
    let mut parent: Vec<usize> = (0..m + linkage.merges.len()).collect();
    for (k, merge) in linkage.merges.iter().enumerate() {
        if merge.distance < threshold {
            let node = m + k;
            for child in [merge.a, merge.b] {
                let r = find(&mut parent, child);
                parent[r] = node;
            }
        }
    }
    let mut root_to_cluster = std::collections::HashMap::new();
    let mut cluster_of = Vec::with_capacity(m);
    for f in 0..m {
        let r = find(&mut parent, f);
        let next = root_to_cluster.len();
        cluster_of.push(*root_to_cluster.entry(r).or_insert(next));
    }
    ClusterAssignment {
        n_clusters: root_to_cluster.len(),
        cluster_of,
        representatives: Vec::new(),
    }
}

/// Picks, per cluster, the member with the highest mean `|ρ|` to the other
/// members; ties go to the lexicographically smallest name.
pub fn select_representatives(assignment: &ClusterAssignment, corr: &CorrelationMatrix) -> ClusterAssignment {
    let mut representatives = Vec::with_capacity(assignment.n_clusters);
    for c in 0..assignment.n_clusters {
        let members = assignment.members(c);
        let mut best = members[0];
        let mut best_score = f64::NEG_INFINITY;
        for &a in &members {
            let score = if members.len() == 1 {
                1.0
            } else {
                members
                    .iter()
                    .filter(|&&b| b != a)
                    .map(|&b| corr.get(a, b).abs())
                    .sum::<f64>()
                    / (members.len() - 1) as f64
            };
            if score > best_score || (score == best_score && corr.names[a] < corr.names[best]) {
                best = a;
                best_score = score;
            }
        }
        representatives.push(best);
    }
    ClusterAssignment {
        representatives,
        ..assignment.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(cols: Vec<Vec<f64>>) -> EncodedMatrix {
        let names = (0..cols.len()).map(|i| format!("f{i}")).collect();
        EncodedMatrix::new(names, cols).unwrap()
    }

    fn corr(rows: Vec<Vec<f64>>) -> CorrelationMatrix {
        let names = (0..rows.len()).map(|i| format!("f{i}")).collect();
        CorrelationMatrix::from_rows(names, rows).unwrap()
    }

    #[test]
    fn spearman_examples() {
        let c = spearman_matrix(&mat(vec![
            vec![1.0, 2.0, 3.0],
            vec![10.0, 20.0, 30.0],
            vec![30.0, 20.0, 10.0],
        ]))
        .unwrap();
        assert_eq!(c.get(0, 1), 1.0);
        assert_eq!(c.get(0, 2), -1.0);
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
        let c = spearman_matrix(&mat(vec![vec![1.0, 2.0, 2.0, 3.0], vec![1.0, 2.0, 2.0, 3.0]])).unwrap();
        assert!((c.get(0, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_column_is_flagged() {
        let c = spearman_matrix(&mat(vec![vec![1.0, 2.0, 3.0], vec![5.0; 3]])).unwrap();
        assert_eq!(c.constant, vec![false, true]);
        assert_eq!(c.get(0, 1), 0.0);
        assert_eq!(c.get(1, 1), 1.0);
    }

    /// Ranks by counting and textbook Pearson.
    fn oracle_spearman(cols: &[Vec<f64>], i: usize, j: usize) -> f64 {
        let rank = |c: &[f64]| -> Vec<f64> {
            c.iter()
                .map(|&x| {
                    let less = c.iter().filter(|&&y| y < x).count() as f64;
                    let eq = c.iter().filter(|&&y| y == x).count() as f64;
                    less + (eq + 1.0) / 2.0
                })
                .collect()
        };
        let (a, b) = (rank(&cols[i]), rank(&cols[j]));
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        if va == 0.0 || vb == 0.0 {
            0.0
        } else {
            cov / (va * vb).sqrt()
        }
    }

    /// Ward height between explicit member sets: sqrt of
    /// `2·|A||B|/(|A|+|B|)·(mean_AB d² − ½·mean_AA d² − ½·mean_BB d²)`,
    /// i.e. the centroid distance expressed through pairwise distances.
    fn oracle_height(d: &[Vec<f64>], a: &[usize], b: &[usize]) -> f64 {
        let mean = |x: &[usize], y: &[usize]| -> f64 {
            let mut s = 0.0;
            for &i in x {
                for &j in y {
                    s += d[i][j] * d[i][j];
                }
            }
            s / (x.len() * y.len()) as f64
        };
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let h2 = 2.0 * na * nb / (na + nb) * (mean(a, b) - 0.5 * mean(a, a) - 0.5 * mean(b, b));
        h2.max(0.0).sqrt()
    }

    fn oracle_ward(c: &CorrelationMatrix) -> Vec<(usize, usize, f64)> {
        let m = c.len();
        let d: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                (0..m)
                    .map(|j| if i == j { 0.0 } else { 1.0 - c.get(i, j).abs() })
                    .collect()
            })
            .collect();
        let mut clusters: Vec<(usize, Vec<usize>)> = (0..m).map(|i| (i, vec![i])).collect();
        let mut out = Vec::new();
        for step in 0..m - 1 {
            let mut best: Option<(f64, usize, usize)> = None;
            for x in 0..clusters.len() {
                for y in x + 1..clusters.len() {
                    let h = oracle_height(&d, &clusters[x].1, &clusters[y].1);
                    let key = |p: usize, q: usize| {
                        let (a, b) = (clusters[p].0, clusters[q].0);
                        (a.min(b), a.max(b))
                    };
                    let better = match best {
                        None => true,
                        Some((bh, bx, by)) => h < bh - 1e-12 || ((h - bh).abs() <= 1e-12 && key(x, y) < key(bx, by)),
                    };
                    if better {
                        best = Some((h, x, y));
                    }
                }
            }
            let (h, x, y) = best.unwrap();
            let (ia, ib) = (clusters[x].0, clusters[y].0);
            let mut members = clusters[x].1.clone();
            members.extend(&clusters[y].1);
            clusters.remove(y);
            clusters[x] = (m + step, members);
            out.push((ia.min(ib), ia.max(ib), h));
        }
        out
    }

    #[test]
    fn ward_small_cases() {
        let c = corr(vec![vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let l = ward_cluster(&c).unwrap();
        assert_eq!((l.merges[0].a, l.merges[0].b, l.merges[0].distance), (0, 1, 0.0));
        assert_eq!((l.merges[1].a, l.merges[1].b, l.merges[1].size), (2, 3, 3));

        let id = corr(
            (0..4)
                .map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
        );
        let l = ward_cluster(&id).unwrap();
        assert_eq!((l.merges[0].a, l.merges[0].b, l.merges[0].distance), (0, 1, 1.0));
        assert_eq!((l.merges[1].a, l.merges[1].b), (2, 3));
        assert!(ward_cluster(&corr(vec![vec![1.0]])).is_err());
    }

    #[test]
    fn cuts_and_representatives() {
        let c = corr(vec![
            vec![1.0, 0.9, 0.5, 0.0],
            vec![0.9, 1.0, 0.8, 0.0],
            vec![0.5, 0.8, 1.0, 0.1],
            vec![0.0, 0.0, 0.1, 1.0],
        ]);
        let l = ward_cluster(&c).unwrap();
        let none = cut_clusters(&l, 1e-9);
        assert_eq!(none.n_clusters, 4);
        assert_eq!(select_representatives(&none, &c).representatives, vec![0, 1, 2, 3]);
        let all = cut_clusters(&l, 1e9);
        assert_eq!(all.n_clusters, 1);

        // A, B, C cluster; mean |ρ|: A 0.7, B 0.85, C 0.65 -> B
        let abc = ClusterAssignment {
            cluster_of: vec![0, 0, 0, 1],
            n_clusters: 2,
            representatives: vec![],
        };
        assert_eq!(select_representatives(&abc, &c).representatives, vec![1, 3]);

        // tie -> lexicographic name
        let tie =
            CorrelationMatrix::from_rows(vec!["b".into(), "a".into()], vec![vec![1.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let one = ClusterAssignment {
            cluster_of: vec![0, 0],
            n_clusters: 1,
            representatives: vec![],
        };
        assert_eq!(select_representatives(&one, &tie).representatives, vec![1]);
    }

    fn random_columns(seed: u64, n: usize, m: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (0..m)
            .map(|j| {
                let mix: f64 = rng.gen_range(0.0..1.0);
                (0..n)
                    .map(|i| {
                        let x = mix * base[i] + (1.0 - mix) * rng.gen_range(-1.0..1.0);
                        // a few ties
                        if j % 3 == 0 {
                            (x * 4.0).round()
                        } else {
                            x
                        }
                    })
                    .collect()
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn spearman_matches_oracle(seed in any::<u64>(), n in 2usize..200, m in 1usize..20) {
            let cols = random_columns(seed, n, m);
            let c = spearman_matrix(&mat(cols.clone())).unwrap();
            for i in 0..m {
                for j in 0..m {
                    let want = if i == j { 1.0 } else { oracle_spearman(&cols, i, j) };
                    prop_assert!((c.get(i, j) - want).abs() < 1e-12);
                    prop_assert_eq!(c.get(i, j), c.get(j, i));
                }
            }
        }

        #[test]
        fn spearman_ignores_monotone_transforms(seed in any::<u64>(), n in 2usize..100, m in 2usize..8) {
            let cols = random_columns(seed, n, m);
            let mut moved = cols.clone();
            moved[0] = moved[0].iter().map(|x| (3.0 * x).exp() + 7.0).collect();
            moved[1] = moved[1].iter().map(|x| x * x * x - 2.0).collect();
            prop_assert_eq!(spearman_matrix(&mat(cols)).unwrap(), spearman_matrix(&mat(moved)).unwrap());
        }

        #[test]
        fn ward_matches_brute_force(seed in any::<u64>(), m in 2usize..=8) {
            let c = spearman_matrix(&mat(random_columns(seed, 40, m))).unwrap();
            let l = ward_cluster(&c).unwrap();
            let oracle = oracle_ward(&c);
            prop_assert_eq!(l.merges.len(), m - 1);
            for (got, want) in l.merges.iter().zip(&oracle) {
                prop_assert_eq!((got.a, got.b), (want.0, want.1));
                prop_assert!((got.distance - want.2).abs() < 1e-9);
            }
            prop_assert_eq!(l.merges.last().unwrap().size, m);
        }

        #[test]
        fn ward_heights_non_decreasing(seed in any::<u64>(), m in 2usize..30) {
            let c = spearman_matrix(&mat(random_columns(seed, 30, m))).unwrap();
            let l = ward_cluster(&c).unwrap();
            for w in l.merges.windows(2) {
                prop_assert!(w[0].distance <= w[1].distance);
            }
        }

        #[test]
        fn cut_assigns_every_feature(seed in any::<u64>(), m in 2usize..20, t in 0.01f64..2.0) {
            let c = spearman_matrix(&mat(random_columns(seed, 30, m))).unwrap();
            let a = select_representatives(&cut_clusters(&ward_cluster(&c).unwrap(), t), &c);
            prop_assert_eq!(a.cluster_of.len(), m);
            prop_assert_eq!(a.representatives.len(), a.n_clusters);
            for (k, &r) in a.representatives.iter().enumerate() {
                prop_assert_eq!(a.cluster_of[r], k);
            }
        }
    }
}
