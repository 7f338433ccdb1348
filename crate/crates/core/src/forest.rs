//! Random forest of unbounded-depth Gini trees on bootstrap resamples.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FlowDataset, Label};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 300,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        class: u8,
    },
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    /// Preorder; the root is node 0.
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, row: &[f64]) -> u8 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { class } => return class,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, at: usize) -> usize {
            match t.nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }

    pub fn leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }
}

/// Training rows for one tree: unique row indices with multiplicities.
struct Sample<'a> {
    data: &'a FlowDataset,
    weight: Vec<u32>,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    feature: usize,
    threshold: f64,
    /// Weighted child impurity, lower is better.
    child_impurity: f64,
}

fn gini_weighted(c0: f64, c1: f64) -> f64 {
    let n = c0 + c1;
    if n == 0.0 {
        return 0.0;
    }
    // n * gini = n - (c0^2 + c1^2) / n
    n - (c0 * c0 + c1 * c1) / n
}

/// Grows a tree over `rows` (indices into `sample.data`). `choose` returns
/// the candidate features for each internal node in preorder.
fn grow(
    sample: &Sample,
    rows: &mut [usize],
    choose: &mut dyn FnMut(usize) -> Vec<usize>,
    nodes: &mut Vec<Node>,
) -> usize {
    let d = sample.data.dimension();
    let (mut c0, mut c1) = (0.0, 0.0);
    for &r in rows.iter() {
        let w = sample.weight[r] as f64;
        if sample.data.label(r) == Label::Normal {
            c0 += w;
        } else {
            c1 += w;
        }
    }
    let majority = if c1 > c0 { 1 } else { 0 };
    let at = nodes.len();
    nodes.push(Node::Leaf { class: majority });
    if c0 == 0.0 || c1 == 0.0 {
        return at;
    }
    let drawn = choose(d);
    let best = best_split(sample, rows, &drawn, c0, c1).or_else(|| {
        let rest: Vec<usize> = (0..d).filter(|f| !drawn.contains(f)).collect();
        best_split(sample, rows, &rest, c0, c1)
    });
    let Some(best) = best else {
        return at;
    };
    let mid = partition(rows, |r| sample.data.row(r)[best.feature] <= best.threshold);
    let (l, r) = rows.split_at_mut(mid);
    let left = grow(sample, l, choose, nodes);
    let right = grow(sample, r, choose, nodes);
    nodes[at] = Node::Split {
        feature: best.feature,
        threshold: best.threshold,
        left,
        right,
    };
    at
}

fn partition(rows: &mut [usize], pred: impl Fn(usize) -> bool) -> usize {
    // Stable, so child row order (and float sums) never depend on history.
    let (mut yes, no): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| pred(r));
    let mid = yes.len();
    yes.extend(no);
    rows.copy_from_slice(&yes);
    mid
}

/// Best split over `features` in the given order; ties keep the earlier
/// feature, then the lower threshold. `None` when every feature is constant
/// on `rows`.
fn best_split(
    sample: &Sample,
    rows: &[usize],
    features: &[usize],
    c0: f64,
    c1: f64,
) -> Option<Candidate> {
    let mut best: Option<Candidate> = None;
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(rows.len());
    for &f in features {
        order.clear();
        order.extend(rows.iter().map(|&r| (sample.data.row(r)[f], r)));
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (mut l0, mut l1) = (0.0, 0.0);
        for i in 0..order.len() - 1 {
            let (x, r) = order[i];
            let w = sample.weight[r] as f64;
            if sample.data.label(r) == Label::Normal {
                l0 += w;
            } else {
                l1 += w;
            }
            let next = order[i + 1].0;
            if next <= x {
                continue;
            }
            let imp = gini_weighted(l0, l1) + gini_weighted(c0 - l0, c1 - l1);
            let threshold = midpoint(x, next);
            if best.is_none_or(|b| imp < b.child_impurity) {
                best = Some(Candidate {
                    feature: f,
                    threshold,
                    child_impurity: imp,
                });
            }
        }
    }
    best
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    // Guard against rounding up to `b` for adjacent floats.
    if m >= b {
        a
    } else {
        m
    }
}

/// Fits one tree on rows weighted by `weight` (bootstrap multiplicities).
pub fn fit_tree_with(
    data: &FlowDataset,
    weight: Vec<u32>,
    choose: &mut dyn FnMut(usize) -> Vec<usize>,
) -> Tree {
    let sample = Sample { data, weight };
    let mut rows: Vec<usize> = (0..data.len()).filter(|&r| sample.weight[r] > 0).collect();
    let mut nodes = Vec::new();
    if rows.is_empty() {
        nodes.push(Node::Leaf { class: 0 });
    } else {
        grow(&sample, &mut rows, choose, &mut nodes);
    }
    Tree { nodes }
}

/// Number of candidate features per split.
pub fn features_per_split(d: usize) -> usize {
    ((d as f64).sqrt().ceil() as usize).clamp(1, d)
}

/// Bootstrap multiplicities of size `n`, then a tree whose per-node feature
/// subsets come from the same generator.
pub fn fit_tree<R: Rng>(data: &FlowDataset, rng: &mut R) -> Tree {
    let n = data.len();
    let mut weight = vec![0u32; n];
    for _ in 0..n {
        weight[rng.random_range(0..n)] += 1;
    }
    let k = features_per_split(data.dimension());
    fit_tree_with(data, weight, &mut |d| sample(rng, d, k).into_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub config: ForestConfig,
    pub dimension: usize,
    pub trees: Vec<Tree>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ForestError {
    #[error("training set needs both classes, found counts {0:?}")]
    SingleClass([usize; 2]),
    #[error("n_trees must be at least 1")]
    NoTrees,
    #[error("dimension mismatch: forest expects {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Per-tree generator seeds, drawn sequentially from the forest seed.
pub fn tree_seeds(config: &ForestConfig) -> Vec<u64> {
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.n_trees).map(|_| master.random()).collect()
}

pub fn train_forest(train: &FlowDataset, config: ForestConfig) -> Result<Forest, ForestError> {
    let counts = [
        train.class_count(Label::Normal),
        train.class_count(Label::Mining),
    ];
    if counts[0] == 0 || counts[1] == 0 {
        return Err(ForestError::SingleClass(counts));
    }
    if config.n_trees == 0 {
        return Err(ForestError::NoTrees);
    }
    let trees = tree_seeds(&config)
        .into_par_iter()
        .map(|s| fit_tree(train, &mut ChaCha8Rng::seed_from_u64(s)))
        .collect();
    Ok(Forest {
        config,
        dimension: train.dimension(),
        trees,
    })
}

impl Forest {
    pub fn votes(&self, row: &[f64]) -> usize {
        self.trees.iter().filter(|t| t.predict(row) == 1).count()
    }

    /// Fraction of trees voting class 1 for each row.
    pub fn predict_proba(&self, records: &FlowDataset) -> Result<Vec<f64>, ForestError> {
        if records.dimension() != self.dimension {
            return Err(ForestError::DimensionMismatch {
                expected: self.dimension,
                found: records.dimension(),
            });
        }
        let n = self.trees.len() as f64;
        Ok((0..records.len())
            .into_par_iter()
            .map(|i| self.votes(records.row(i)) as f64 / n)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Lineage;

    fn toy() -> FlowDataset {
        let rows = vec![
            (vec![0.0, 0.0], 0),
            (vec![0.2, 1.0], 0),
            (vec![0.4, 0.3], 0),
            (vec![1.0, 0.1], 1),
            (vec![1.3, 0.9], 1),
            (vec![1.6, 0.5], 1),
        ];
        let (f, l): (Vec<Vec<f64>>, Vec<u8>) = rows.into_iter().unzip();
        FlowDataset::from_rows(
            2,
            f.concat(),
            l.into_iter().map(|v| Label::try_from(v).unwrap()).collect(),
            Lineage::real("toy"),
        )
        .unwrap()
    }

    #[test]
    fn separable_training_accuracy() {
        let ds = toy();
        let forest = train_forest(&ds, ForestConfig { n_trees: 25, seed: 3 }).unwrap();
        let p = forest.predict_proba(&ds).unwrap();
        for (i, pi) in p.iter().enumerate() {
            let pred = if *pi > 0.5 { 1 } else { 0 };
            assert_eq!(pred, ds.label(i) as u8);
        }
    }

    #[test]
    fn single_class_rejected() {
        let ds = FlowDataset::single_class(1, vec![0.0, 1.0], Label::Normal, Lineage::real("x"))
            .unwrap();
        assert!(matches!(
            train_forest(&ds, ForestConfig::default()),
            Err(ForestError::SingleClass(_))
        ));
    }

    #[test]
    fn full_weight_tree_is_pure() {
        let ds = toy();
        let tree = fit_tree_with(&ds, vec![1; 6], &mut |d| (0..d).collect());
        assert_eq!(tree.nodes.len(), 3);
        assert_eq!(
            tree.nodes[0],
            Node::Split {
                feature: 0,
                threshold: 0.7,
                left: 1,
                right: 2
            }
        );
    }

    #[test]
    fn unsplittable_node_is_majority_leaf() {
        let ds = FlowDataset::from_rows(
            1,
            vec![1.0, 1.0, 1.0],
            vec![Label::Mining, Label::Normal, Label::Mining],
            Lineage::real("x"),
        )
        .unwrap();
        let tree = fit_tree_with(&ds, vec![1, 1, 1], &mut |d| (0..d).collect());
        assert_eq!(tree.nodes, vec![Node::Leaf { class: 1 }]);
        let tie = fit_tree_with(&ds, vec![1, 1, 0], &mut |d| (0..d).collect());
        assert_eq!(tie.nodes, vec![Node::Leaf { class: 0 }]);
    }

    #[test]
    fn falls_back_to_remaining_features() {
        // Feature 0 is constant, so a draw of {0} must fall back to feature 1.
        let ds = FlowDataset::from_rows(
            2,
            vec![1.0, 0.0, 1.0, 1.0],
            vec![Label::Normal, Label::Mining],
            Lineage::real("x"),
        )
        .unwrap();
        let tree = fit_tree_with(&ds, vec![1, 1], &mut |_| vec![0]);
        assert!(matches!(tree.nodes[0], Node::Split { feature: 1, .. }));
    }

    #[test]
    fn midpoint_of_adjacent_floats() {
        let a = 1.0f64;
        let b = f64::from_bits(a.to_bits() + 1);
        let m = midpoint(a, b);
        assert!(a <= m && m < b);
    }
}
