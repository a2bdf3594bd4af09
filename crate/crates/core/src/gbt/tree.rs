use rand::seq::index;
use rand::Rng;

use super::{leaf_weight, split_gain, GradPair, Hyperparams};
use crate::preprocess::EncodedMatrix;

/// Arena node. Children are indices into [`Tree::nodes`]; rows with
/// `x < threshold` go left.
#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        /// Loss reduction of this split after subtracting `γ`.
        gain: f64,
    },
    Leaf {
        weight: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<TreeNode>,
}

impl Tree {
    /// Builds a tree from an arena whose root is node 0. Child indices must
    /// point forward.
    pub fn from_nodes(nodes: Vec<TreeNode>) -> Option<Tree> {
        if nodes.is_empty() {
            return None;
        }
        let n = nodes.len();
        let mut referenced = vec![0u8; n];
        for (i, node) in nodes.iter().enumerate() {
            match *node {
                TreeNode::Split {
                    left,
                    right,
                    threshold,
                    gain,
                    ..
                } => {
                    if left <= i || right <= i || left >= n || right >= n || left == right {
                        return None;
                    }
                    if !threshold.is_finite() || !gain.is_finite() {
                        return None;
                    }
                    referenced[left] += 1;
                    referenced[right] += 1;
                }
                TreeNode::Leaf { weight } => {
                    if !weight.is_finite() {
                        return None;
                    }
                }
            }
        }
        if referenced[0] != 0 || referenced[1..].iter().any(|&c| c != 1) {
            return None;
        }
        Some(Tree { nodes })
    }

    pub fn leaf(weight: f64) -> Tree {
        Tree {
            nodes: vec![TreeNode::Leaf { weight }],
        }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    /// Number of leaves `T`.
    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }

    pub fn leaf_weights(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            TreeNode::Leaf { weight } => Some(*weight),
            _ => None,
        })
    }

    /// `(feature, gain)` of every split.
    pub fn split_gains(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            TreeNode::Split { feature, gain, .. } => Some((*feature, *gain)),
            _ => None,
        })
    }

    pub fn uses_feature(&self, feature: usize) -> bool {
        self.split_gains().any(|(f, _)| f == feature)
    }

    /// Depth of the deepest leaf (a single leaf has depth 0).
    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.nodes.len()];
        let mut max = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            max = max.max(depth[i]);
            if let TreeNode::Split { left, right, .. } = *node {
                depth[left] = depth[i] + 1;
                depth[right] = depth[i] + 1;
            }
        }
        max
    }

    /// Leaf weight reached by row `row` of column-major `columns`.
    #[inline]
    pub fn predict_at(&self, columns: &[Vec<f64>], row: usize) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { weight } => return weight,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if columns[feature][row] < threshold { left } else { right };
                }
            }
        }
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { weight } => return weight,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if x[feature] < threshold { left } else { right };
                }
            }
        }
    }

    /// Prediction where `value(feature)` supplies the row's feature values.
    pub fn predict_with(&self, value: impl Fn(usize) -> f64) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { weight } => return weight,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if value(feature) < threshold { left } else { right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Midpoint between consecutive distinct values, nudged so that `lo` stays
/// strictly left of it.
#[inline]
fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) * 0.5;
    if mid <= lo {
        hi
    } else {
        mid
    }
}

/// Scans rows sorted ascending by value (`values[i]` belongs to
/// `sorted_rows[i]`) and returns the best threshold and gain. Earlier (lower)
/// thresholds win ties.
#[inline]
fn scan_sorted(
    values: &[f64],
    sorted_rows: &[u32],
    grads: &[GradPair],
    total: GradPair,
    params: &Hyperparams,
) -> Option<(f64, f64)> {
    let lambda = params.lambda;
    let mch = params.min_child_hessian;
    let mut gl = 0.0;
    let mut hl = 0.0;
    let mut best: Option<(f64, f64)> = None;
    let last = sorted_rows.len().checked_sub(1)?;
    for i in 0..last {
        let r = sorted_rows[i] as usize;
        gl += grads[r].g;
        hl += grads[r].h;
        let v = values[i];
        let next = values[i + 1];
        if v == next {
            continue;
        }
        let gr = total.g - gl;
        let hr = total.h - hl;
        if hl < mch || hr < mch || hl + lambda <= 0.0 || hr + lambda <= 0.0 {
            continue;
        }
        let gain = split_gain(gl, hl, gr, hr, lambda, params.gamma);
        if best.is_none_or(|(_, g)| gain > g) {
            best = Some((midpoint(v, next), gain));
        }
    }
    best
}

fn sum_pairs(rows: impl Iterator<Item = usize>, grads: &[GradPair]) -> GradPair {
    let mut total = GradPair::default();
    for r in rows {
        total.g += grads[r].g;
        total.h += grads[r].h;
    }
    total
}

/// Exact greedy search over `columns` (taken in ascending order) for the split
/// of `rows` with the largest gain. Returns `None` when no candidate has
/// positive gain after `γ` or satisfies `min_child_hessian`. Ties go to the
/// lowest feature index, then the lowest threshold.
pub fn find_best_split(
    matrix: &EncodedMatrix,
    rows: &[usize],
    columns: &[usize],
    grads: &[GradPair],
    params: &Hyperparams,
) -> Option<SplitCandidate> {
    if rows.len() < 2 {
        return None;
    }
    let total = sum_pairs(rows.iter().copied(), grads);
    let mut cols = columns.to_vec();
    cols.sort_unstable();
    cols.dedup();
    let mut sorted: Vec<u32> = Vec::with_capacity(rows.len());
    let mut best: Option<SplitCandidate> = None;
    for &c in &cols {
        let values = matrix.column(c);
        sorted.clear();
        sorted.extend(rows.iter().map(|&r| r as u32));
        sorted.sort_by(|&a, &b| values[a as usize].total_cmp(&values[b as usize]));
        let sorted_values: Vec<f64> = sorted.iter().map(|&r| values[r as usize]).collect();
        if let Some((threshold, gain)) = scan_sorted(&sorted_values, &sorted, grads, total, params) {
            if best.is_none_or(|b| gain > b.gain) {
                best = Some(SplitCandidate {
                    feature: c,
                    threshold,
                    gain,
                });
            }
        }
    }
    best.filter(|b| b.gain > 0.0)
}

/// Per-column row orders sorted by value, computed once per training matrix
/// and reused by every tree.
#[derive(Debug, Clone)]
pub struct SortedColumns {
    order: Vec<Vec<u32>>,
}

impl SortedColumns {
    pub fn new(matrix: &EncodedMatrix) -> Self {
        let order = (0..matrix.n_cols())
            .map(|c| {
                let values = matrix.column(c);
                let mut idx: Vec<u32> = (0..matrix.n_rows() as u32).collect();
                idx.sort_by(|&a, &b| values[a as usize].total_cmp(&values[b as usize]));
                idx
            })
            .collect();
        SortedColumns { order }
    }
}

struct Builder<'a> {
    columns: &'a [Vec<f64>],
    grads: &'a [GradPair],
    params: &'a Hyperparams,
    /// Sampled feature indices, ascending.
    features: Vec<usize>,
    /// One row order per sampled feature. Every node owns the same
    /// `[start, end)` range in each of them.
    order: Vec<Vec<u32>>,
    /// Feature values laid out like `order`.
    values: Vec<Vec<f64>>,
    go_left: Vec<bool>,
    scratch: Vec<u32>,
    scratch_values: Vec<f64>,
    nodes: Vec<TreeNode>,
}

impl Builder<'_> {
    fn leaf(&mut self, total: GradPair) -> usize {
        let weight = leaf_weight(total.g, total.h, self.params.lambda).unwrap_or(0.0);
        self.nodes.push(TreeNode::Leaf { weight });
        self.nodes.len() - 1
    }

    fn grow(&mut self, start: usize, end: usize, depth: usize) -> usize {
        let total = sum_pairs(self.order[0][start..end].iter().map(|&r| r as usize), self.grads);
        if depth >= self.params.max_depth || end - start < 2 {
            return self.leaf(total);
        }

        let mut best: Option<(usize, f64, f64)> = None;
        for k in 0..self.features.len() {
            let seg = &self.order[k][start..end];
            if let Some((threshold, gain)) =
                scan_sorted(&self.values[k][start..end], seg, self.grads, total, self.params)
            {
                if best.is_none_or(|(_, _, g)| gain > g) {
                    best = Some((k, threshold, gain));
                }
            }
        }
        let Some((k, threshold, gain)) = best.filter(|b| b.2 > 0.0) else {
            return self.leaf(total);
        };
        let feature = self.features[k];

        let values = &self.columns[feature];
        let mut n_left = 0;
        for &r in &self.order[0][start..end] {
            let left = values[r as usize] < threshold;
            self.go_left[r as usize] = left;
            n_left += left as usize;
        }
        let len = end - start;
        self.scratch.resize(len, 0);
        self.scratch_values.resize(len, 0.0);
        for (seg_order, seg_values) in self.order.iter_mut().zip(self.values.iter_mut()) {
            let seg = &mut seg_order[start..end];
            let vals = &mut seg_values[start..end];
            // Stable branch-free partition: left rows compact in place, right
            // rows go to scratch and are copied back behind them.
            let (mut w, mut s) = (0, 0);
            for i in 0..len {
                let r = seg[i];
                let v = vals[i];
                let left = self.go_left[r as usize];
                seg[w] = r;
                vals[w] = v;
                self.scratch[s] = r;
                self.scratch_values[s] = v;
                w += left as usize;
                s += !left as usize;
            }
            seg[w..].copy_from_slice(&self.scratch[..s]);
            vals[w..].copy_from_slice(&self.scratch_values[..s]);
        }

        let me = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { weight: 0.0 });
        let left = self.grow(start, start + n_left, depth + 1);
        let right = self.grow(start + n_left, end, depth + 1);
        self.nodes[me] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
            gain,
        };
        me
    }
}

/// Grows one tree depth-first on `rows`, sampling `col_sample` of the features
/// from `rng`. Growth stops at `max_depth`, at single-row nodes, or when no
/// split has positive gain.
pub fn build_tree<R: Rng>(
    matrix: &EncodedMatrix,
    sorted: &SortedColumns,
    rows: &[usize],
    grads: &[GradPair],
    params: &Hyperparams,
    rng: &mut R,
) -> Tree {
    let m = matrix.n_cols();
    let n = matrix.n_rows();
    let features: Vec<usize> = if params.col_sample >= 1.0 || m <= 1 {
        (0..m).collect()
    } else {
        let k = ((params.col_sample * m as f64).round() as usize).clamp(1, m);
        let mut f = index::sample(rng, m, k).into_vec();
        f.sort_unstable();
        f
    };
    if rows.is_empty() || features.is_empty() {
        let total = sum_pairs(rows.iter().copied(), grads);
        return Tree::leaf(leaf_weight(total.g, total.h, params.lambda).unwrap_or(0.0));
    }

    let full = rows.len() == n;
    let mut in_sample = Vec::new();
    if !full {
        in_sample = vec![false; n];
        for &r in rows {
            in_sample[r] = true;
        }
    }
    let order: Vec<Vec<u32>> = features
        .iter()
        .map(|&f| {
            if full {
                sorted.order[f].clone()
            } else {
                sorted.order[f]
                    .iter()
                    .copied()
                    .filter(|&r| in_sample[r as usize])
                    .collect()
            }
        })
        .collect();

    let values = features
        .iter()
        .zip(&order)
        .map(|(&f, o)| {
            let col = matrix.column(f);
            o.iter().map(|&r| col[r as usize]).collect()
        })
        .collect();

    let mut builder = Builder {
        columns: matrix.columns(),
        grads,
        params,
        features,
        order,
        values,
        go_left: vec![false; n],
        scratch: Vec::with_capacity(rows.len()),
        scratch_values: Vec::with_capacity(rows.len()),
        nodes: Vec::new(),
    };
    builder.grow(0, rows.len(), 0);
    Tree { nodes: builder.nodes }
}
