//! Isolation-forest scoring of slide representations.
//!
//! Each tree is grown on a subsample of ψ training vectors by recursive random
//! axis-aligned splits up to depth ⌈log₂ ψ⌉. A query's path length is its leaf
//! depth plus `c(leaf size)`; the normality score is `1 − 2^(−E[h]/c(ψ))`, so
//! higher means more in-distribution.
//!
//! Subsample membership of training row `i` in tree `t` is decided by a hash
//! of `(seed, t, i)` alone (the ψ smallest keys), so appending rows that never
//! enter a subsample leaves every tree unchanged.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{ensure_finite, H2tError, Result};
use crate::projection::SlideRepresentation;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub subsample: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            subsample: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    /// Rows with `x[feature] <= value` go left.
    Split {
        feature: usize,
        value: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        size: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsolationTree {
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsolationForest {
    trees: Vec<IsolationTree>,
    subsample: usize,
    height_limit: usize,
    seed: u64,
    dim: usize,
}

/// Average unsuccessful-search path length of a binary search tree on `n` keys.
pub fn average_path_length(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let m = n - 1;
            2.0 * harmonic(m) - 2.0 * m as f64 / n as f64
        }
    }
}

fn harmonic(m: usize) -> f64 {
    if m <= 4096 {
        (1..=m).rev().map(|i| 1.0 / i as f64).sum()
    } else {
        let x = m as f64;
        x.ln() + EULER_GAMMA + 1.0 / (2.0 * x) - 1.0 / (12.0 * x * x)
    }
}

/// `1 − 2^(−h/c)`.
pub fn normality_from_path(mean_path: f64, c: f64) -> f64 {
    1.0 - 2f64.powf(-mean_path / c)
}

fn split_mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn subsample_indices(n: usize, psi: usize, seed: u64, tree: usize) -> Vec<usize> {
    let base = split_mix(seed ^ split_mix(tree as u64));
    let mut keyed: Vec<(u64, usize)> = (0..n).map(|i| (split_mix(base ^ split_mix(i as u64 ^ 0xA5A5)), i)).collect();
    keyed.select_nth_unstable(psi - 1);
    let mut idx: Vec<usize> = keyed[..psi].iter().map(|&(_, i)| i).collect();
    idx.sort_unstable();
    idx
}

fn grow(
    data: &Array2<f64>,
    rows: &mut [usize],
    depth: usize,
    limit: usize,
    rng: &mut ChaCha8Rng,
    nodes: &mut Vec<Node>,
) -> usize {
    let at = nodes.len();
    nodes.push(Node::Leaf { size: rows.len() });
    if depth >= limit || rows.len() <= 1 {
        return at;
    }
    let ranges: Vec<(usize, f64, f64)> = (0..data.ncols())
        .filter_map(|f| {
            let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
                (lo.min(data[[r, f]]), hi.max(data[[r, f]]))
            });
            (lo < hi).then_some((f, lo, hi))
        })
        .collect();
    if ranges.is_empty() {
        return at;
    }
    let (feature, lo, hi) = ranges[rng.random_range(0..ranges.len())];
    let mut value = rng.random_range(lo..hi);
    if value >= hi {
        value = lo;
    }
    let mut split = 0;
    for i in 0..rows.len() {
        if data[[rows[i], feature]] <= value {
            rows.swap(i, split);
            split += 1;
        }
    }
    let (l, r) = rows.split_at_mut(split);
    let left = grow(data, l, depth + 1, limit, rng, nodes);
    let right = grow(data, r, depth + 1, limit, rng, nodes);
    nodes[at] = Node::Split { feature, value, left, right };
    at
}

impl IsolationTree {
    fn path_length(&self, x: ArrayView1<f64>) -> f64 {
        let mut at = 0;
        let mut depth = 0.0;
        loop {
            match self.nodes[at] {
                Node::Split { feature, value, left, right } => {
                    at = if x[feature] <= value { left } else { right };
                    depth += 1.0;
                }
                Node::Leaf { size } => return depth + average_path_length(size),
            }
        }
    }

    fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
                Node::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn is_leaf(&self) -> bool {
        self.nodes.len() == 1
    }
}

/// Fits a forest on the rows of `train`.
pub fn fit_forest(train: &Array2<f64>, config: &ForestConfig) -> Result<IsolationForest> {
    let (n, dim) = train.dim();
    if n < 2 {
        return Err(H2tError::invalid(format!("isolation forest needs at least 2 training rows, got {n}")));
    }
    if dim == 0 {
        return Err(H2tError::invalid("isolation forest needs at least one feature"));
    }
    if config.n_trees == 0 || config.subsample < 2 {
        return Err(H2tError::invalid("isolation forest needs n_trees ≥ 1 and subsample ≥ 2"));
    }
    ensure_finite(train.iter().copied(), "isolation forest training data")?;
    let psi = config.subsample.min(n);
    let height_limit = (psi as f64).log2().ceil() as usize;
    let trees = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rows = subsample_indices(n, psi, config.seed, t);
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(t as u64);
            let mut nodes = Vec::new();
            grow(train, &mut rows, 0, height_limit, &mut rng, &mut nodes);
            IsolationTree { nodes }
        })
        .collect();
    Ok(IsolationForest {
        trees,
        subsample: psi,
        height_limit,
        seed: config.seed,
        dim,
    })
}

impl IsolationForest {
    pub fn trees(&self) -> &[IsolationTree] {
        &self.trees
    }

    pub fn subsample(&self) -> usize {
        self.subsample
    }

    pub fn height_limit(&self) -> usize {
        self.height_limit
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn max_depth(&self) -> usize {
        self.trees.iter().map(IsolationTree::depth).max().unwrap_or(0)
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(H2tError::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        ensure_finite(x.iter().copied(), "isolation forest query")
    }

    /// Path length of `x` in each tree.
    pub fn path_lengths(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let v = ArrayView1::from(x);
        Ok(self.trees.iter().map(|t| t.path_length(v)).collect())
    }

    pub fn normality_score(&self, x: &[f64]) -> Result<f64> {
        let paths = self.path_lengths(x)?;
        let mean = paths.iter().sum::<f64>() / paths.len() as f64;
        Ok(normality_from_path(mean, average_path_length(self.subsample)))
    }

    /// Scores every row of `queries`, in row order.
    pub fn score_rows(&self, queries: &Array2<f64>) -> Result<Vec<f64>> {
        (0..queries.nrows())
            .into_par_iter()
            .map(|i| {
                let row = queries.row(i).to_vec();
                self.normality_score(&row)
            })
            .collect()
    }
}

/// Stacks flattened representations into rows, keyed order preserved.
pub fn representation_rows(reps: &BTreeMap<String, SlideRepresentation>) -> Result<(Vec<String>, Array2<f64>)> {
    let dim = reps.values().next().map_or(0, |r| r.matrix.len());
    let mut x = Array2::zeros((reps.len(), dim));
    for (mut row, (id, r)) in x.rows_mut().into_iter().zip(reps) {
        if r.matrix.len() != dim {
            return Err(H2tError::invalid(format!(
                "representation of {id} has {} values, expected {dim}",
                r.matrix.len()
            )));
        }
        row.assign(&r.flattened());
    }
    Ok((reps.keys().cloned().collect(), x))
}

/// Fits on `train` and returns `(slide_id, normality)` for each slide of `score`.
pub fn score_representations(
    train: &BTreeMap<String, SlideRepresentation>,
    score: &BTreeMap<String, SlideRepresentation>,
    config: &ForestConfig,
) -> Result<Vec<(String, f64)>> {
    let (_, x) = representation_rows(train)?;
    let forest = fit_forest(&x, config)?;
    let (ids, q) = representation_rows(score)?;
    Ok(ids.into_iter().zip(forest.score_rows(&q)?).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn normals(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))
    }

    fn cfg(n_trees: usize, subsample: usize, seed: u64) -> ForestConfig {
        ForestConfig { n_trees, subsample, seed }
    }

    #[test]
    fn normalizer_values() {
        assert_eq!(average_path_length(2), 1.0);
        assert_eq!(average_path_length(1), 0.0);
        assert!((average_path_length(3) - 5.0 / 3.0).abs() < 1e-15);
        let exact = 2.0 * (1..5000).map(|i| 1.0 / i as f64).sum::<f64>() - 2.0 * 4999.0 / 5000.0;
        assert!((average_path_length(5000) - exact).abs() < 1e-9);
        assert_eq!(normality_from_path(3.7, 3.7), 0.5);
    }

    #[test]
    fn identical_points_give_leaves() {
        let train = Array2::from_elem((2, 3), 1.5);
        let f = fit_forest(&train, &cfg(20, 256, 1)).unwrap();
        assert!(f.trees().iter().all(IsolationTree::is_leaf));
        let a = f.normality_score(&[0.0, 0.0, 0.0]).unwrap();
        let b = f.normality_score(&[9.0, -3.0, 1.5]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, 0.5);
    }

    #[test]
    fn seeded_and_bounded() {
        let train = normals(300, 4, 2);
        let a = fit_forest(&train, &cfg(50, 64, 7)).unwrap();
        assert_eq!(a, fit_forest(&train, &cfg(50, 64, 7)).unwrap());
        assert_ne!(a, fit_forest(&train, &cfg(50, 64, 8)).unwrap());
        assert_eq!(a.height_limit(), 6);
        assert!(a.max_depth() <= 6);
        for s in a.score_rows(&normals(50, 4, 3)).unwrap() {
            assert!(s > 0.0 && s < 1.0);
        }
        assert!(a.normality_score(&[0.0; 3]).is_err());
    }

    #[test]
    fn far_point_isolates_fast() {
        let train = normals(256, 1, 4);
        let f = fit_forest(&train, &cfg(100, 256, 5)).unwrap();
        let query = f.path_lengths(&[50.0]).unwrap();
        let per_tree: Vec<Vec<f64>> = (0..train.nrows()).map(|i| f.path_lengths(&[train[[i, 0]]]).unwrap()).collect();
        let mut shorter = 0;
        for t in 0..100 {
            let mut col: Vec<f64> = per_tree.iter().map(|p| p[t]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = 0.5 * (col[127] + col[128]);
            if query[t] < median {
                shorter += 1;
            }
        }
        assert!(shorter >= 95, "{shorter}");
    }

    #[test]
    fn more_trees_less_variance() {
        let train = normals(400, 3, 6);
        let q = [0.8, -0.4, 1.1];
        let std = |n_trees| {
            let s: Vec<f64> = (0..10)
                .map(|seed| fit_forest(&train, &cfg(n_trees, 256, seed)).unwrap().normality_score(&q).unwrap())
                .collect();
            let m = s.iter().sum::<f64>() / 10.0;
            (s.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 10.0).sqrt()
        };
        assert!(std(200) < std(10));
    }

    #[test]
    fn leaving_support_never_raises_normality() {
        let train = normals(200, 1, 8);
        let f = fit_forest(&train, &cfg(100, 128, 9)).unwrap();
        let (lo, hi) = train.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        for side in [1.0, -1.0] {
            let edge = if side > 0.0 { hi } else { lo };
            let mut prev = f64::INFINITY;
            for step in 0..40 {
                let s = f.normality_score(&[edge + side * 0.25 * step as f64]).unwrap();
                assert!(s <= prev);
                prev = s;
            }
        }
        assert!(f.normality_score(&[hi + 5.0]).unwrap() < f.normality_score(&[0.0]).unwrap());
    }

    #[test]
    fn unused_duplicate_changes_nothing() {
        let train = normals(600, 2, 10);
        let dup_index = train.nrows();
        let config = (0..1000)
            .map(|seed| cfg(30, 64, seed))
            .find(|c| (0..c.n_trees).all(|t| !subsample_indices(dup_index + 1, 64, c.seed, t).contains(&dup_index)))
            .expect("some seed leaves the appended row out");
        let f = fit_forest(&train, &config).unwrap();
        for src in [0, 17, 599] {
            let mut bigger = train.clone();
            bigger.push_row(train.row(src)).unwrap();
            let g = fit_forest(&bigger, &config).unwrap();
            for q in [[0.1, 0.2], [3.0, -1.0], [-0.5, 0.9]] {
                assert_eq!(f.normality_score(&q).unwrap(), g.normality_score(&q).unwrap());
            }
        }
    }

    #[test]
    fn rejects_bad_training() {
        assert!(fit_forest(&Array2::zeros((1, 2)), &ForestConfig::default()).is_err());
        assert!(fit_forest(&Array2::zeros((4, 0)), &ForestConfig::default()).is_err());
        let mut t = Array2::zeros((4, 1));
        t[[2, 0]] = f64::INFINITY;
        assert!(fit_forest(&t, &ForestConfig::default()).is_err());
    }
}
