//! Random forest: bootstrap-bagged binary decision trees grown by greedy
//! Gini splits over a random subset of ceil(sqrt(p)) features per node.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{rng, Elem, Tensor};

/// Paper-tuned defaults.
pub const RF_TREES: usize = 100;
pub const RF_MAX_DEPTH: usize = 11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node")]
pub enum TreeNode {
    Leaf {
        label: u8,
    },
    Split {
        feature: usize,
        threshold: f64,
        /// Index of the `x[feature] <= threshold` child in [`Tree::nodes`].
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    /// Root first; children always appear after their parent.
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict(&self, x: &[Elem]) -> u8 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { label } => return *label,
                TreeNode::Split { feature, threshold, left, right } => {
                    at = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    /// Longest root-to-leaf path measured in splits.
    pub fn depth(&self) -> usize {
        self.depth_from(0)
    }

    fn depth_from(&self, at: usize) -> usize {
        match &self.nodes[at] {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => {
                1 + self.depth_from(*left).max(self.depth_from(*right))
            }
        }
    }
}

/// `1 - sum_c (n_c / n)^2` for binary counts.
pub fn gini(zeros: usize, ones: usize) -> f64 {
    let n = (zeros + ones) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let p0 = zeros as f64 / n;
    let p1 = ones as f64 / n;
    1.0 - p0 * p0 - p1 * p1
}

fn majority(y: &[u8], indices: &[usize]) -> u8 {
    let ones = indices.iter().filter(|&&i| y[i] == 1).count();
    // Ties go to label 0.
    u8::from(2 * ones > indices.len())
}

struct Grower<'a> {
    x: &'a Tensor,
    y: &'a [u8],
    p: usize,
    mtry: usize,
    max_depth: usize,
}

impl Grower<'_> {
    /// Best (feature, threshold, weighted child impurity) over `mtry` random
    /// candidate features; thresholds are midpoints between consecutive
    /// distinct values. Ties keep the lower feature, then lower threshold.
    fn best_split(&self, indices: &[usize], r: &mut ChaCha8Rng) -> Option<(usize, f64, f64)> {
        let mut candidates = rand::seq::index::sample(r, self.p, self.mtry).into_vec();
        candidates.sort_unstable();
        let n = indices.len() as f64;
        let mut best: Option<(usize, f64, f64)> = None;
        for &feature in &candidates {
            let mut order: Vec<usize> = indices.to_vec();
            order.sort_by(|&a, &b| {
                self.x.at(&[a, feature]).total_cmp(&self.x.at(&[b, feature]))
            });
            // Class counts slide from the right partition into the left.
            let total_ones = order.iter().filter(|&&i| self.y[i] == 1).count();
            let mut left_ones = 0;
            for split_at in 1..order.len() {
                let prev = self.x.at(&[order[split_at - 1], feature]);
                let here = self.x.at(&[order[split_at], feature]);
                if self.y[order[split_at - 1]] == 1 {
                    left_ones += 1;
                }
                if prev == here {
                    continue;
                }
                let threshold = prev + (here - prev) / 2.0;
                let left_n = split_at;
                let right_n = order.len() - split_at;
                let weighted = (left_n as f64 * gini(left_n - left_ones, left_ones)
                    + right_n as f64
                        * gini(right_n - (total_ones - left_ones), total_ones - left_ones))
                    / n;
                if best.as_ref().is_none_or(|&(_, _, b)| weighted < b) {
                    best = Some((feature, threshold, weighted));
                }
            }
        }
        best
    }

    fn grow(&self, nodes: &mut Vec<TreeNode>, indices: Vec<usize>, depth: usize, r: &mut ChaCha8Rng) -> usize {
        let here = nodes.len();
        let ones = indices.iter().filter(|&&i| self.y[i] == 1).count();
        let pure = ones == 0 || ones == indices.len();
        if depth >= self.max_depth || pure || indices.len() < 2 {
            nodes.push(TreeNode::Leaf { label: majority(self.y, &indices) });
            return here;
        }
        let Some((feature, threshold, _)) = self.best_split(&indices, r) else {
            // Every candidate feature was constant on this node.
            nodes.push(TreeNode::Leaf { label: majority(self.y, &indices) });
            return here;
        };
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
            indices.iter().partition(|&&i| self.x.at(&[i, feature]) <= threshold);
        nodes.push(TreeNode::Split { feature, threshold, left: 0, right: 0 });
        let left = self.grow(nodes, left_idx, depth + 1, r);
        let right = self.grow(nodes, right_idx, depth + 1, r);
        nodes[here] = TreeNode::Split { feature, threshold, left, right };
        here
    }
}

/// Grow a single tree on the given sample indices (exposed so the split
/// logic can be exercised directly against enumeration oracles).
pub fn grow_tree(
    x: &Tensor,
    y: &[u8],
    indices: &[usize],
    max_depth: usize,
    mtry: usize,
    r: &mut ChaCha8Rng,
) -> Result<Tree> {
    let &[n, p] = x.shape() else {
        return Err(Error::ShapeMismatch {
            op: "grow_tree",
            detail: format!("expected an n x p design, got {:?}", x.shape()),
        });
    };
    if y.len() != n {
        return Err(Error::InvalidArgument(format!("{n} rows but {} labels", y.len())));
    }
    if indices.is_empty() || indices.iter().any(|&i| i >= n) {
        return Err(Error::InvalidArgument("tree needs in-range sample indices".into()));
    }
    if mtry == 0 || mtry > p {
        return Err(Error::InvalidArgument(format!("mtry {mtry} outside 1..={p}")));
    }
    let grower = Grower { x, y, p, mtry, max_depth };
    let mut nodes = Vec::new();
    grower.grow(&mut nodes, indices.to_vec(), 0, r);
    Ok(Tree { nodes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RfModel {
    pub trees: Vec<Tree>,
    /// The bootstrap sample behind each tree, for audit and reproduction.
    pub bootstrap: Vec<Vec<usize>>,
    pub n_features: usize,
    pub max_depth: usize,
    /// Candidate features per split: `ceil(sqrt(p))`.
    pub mtry: usize,
    pub seed: u64,
}

/// Train `n_trees` trees on bootstrap replicas of `(x, y)`.
pub fn rf_train(x: &Tensor, y: &[u8], n_trees: usize, max_depth: usize, seed: u64) -> Result<RfModel> {
    let &[n, p] = x.shape() else {
        return Err(Error::ShapeMismatch {
            op: "rf_train",
            detail: format!("expected an n x p design, got {:?}", x.shape()),
        });
    };
    if n < 2 {
        return Err(Error::InvalidArgument(format!("forest needs at least 2 samples, got {n}")));
    }
    if y.len() != n {
        return Err(Error::InvalidArgument(format!("{n} rows but {} labels", y.len())));
    }
    if y.iter().any(|&v| v > 1) {
        return Err(Error::InvalidArgument("forest labels must be 0 or 1".into()));
    }
    if n_trees == 0 || max_depth == 0 {
        return Err(Error::InvalidArgument("n_trees and max_depth must be positive".into()));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("design matrix contains non-finite values".into()));
    }
    let mtry = (p as f64).sqrt().ceil() as usize;
    let mut trees = Vec::with_capacity(n_trees);
    let mut bootstrap = Vec::with_capacity(n_trees);
    for t in 0..n_trees {
        let mut r = rng::stream(seed, "rf-tree", t as u64);
        let indices: Vec<usize> = (0..n).map(|_| r.gen_range(0..n)).collect();
        trees.push(grow_tree(x, y, &indices, max_depth, mtry, &mut r)?);
        bootstrap.push(indices);
    }
    Ok(RfModel { trees, bootstrap, n_features: p, max_depth, mtry, seed })
}

/// Majority label (ties to 0) and the fraction of trees that voted for it.
pub fn rf_predict(model: &RfModel, x: &[Elem]) -> Result<(u8, f64)> {
    if x.len() != model.n_features {
        return Err(Error::ShapeMismatch {
            op: "rf_predict",
            detail: format!("{} features, model expects {}", x.len(), model.n_features),
        });
    }
    let ones: usize = model.trees.iter().map(|t| t.predict(x) as usize).sum();
    let n = model.trees.len();
    let label = u8::from(2 * ones > n);
    let votes = if label == 1 { ones } else { n - ones };
    Ok((label, votes as f64 / n as f64))
}

/// Fraction of trees voting class 1 — the forest's score for reporting.
pub fn rf_ones_fraction(model: &RfModel, x: &[Elem]) -> Result<f64> {
    let (label, frac) = rf_predict(model, x)?;
    Ok(if label == 1 { frac } else { 1.0 - frac })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(rows: &[(Vec<Elem>, u8)]) -> (Tensor, Vec<u8>) {
        let p = rows[0].0.len();
        let data: Vec<Elem> = rows.iter().flat_map(|(r, _)| r.clone()).collect();
        let y: Vec<u8> = rows.iter().map(|&(_, l)| l).collect();
        (Tensor::new(&[rows.len(), p], data).unwrap(), y)
    }

    #[test]
    fn four_sample_oracle_splits_between_one_and_two() {
        let (x, y) = design(&[
            (vec![0.0], 0),
            (vec![1.0], 0),
            (vec![2.0], 1),
            (vec![3.0], 1),
        ]);
        // Exhaustive enumeration over the three midpoints.
        let mut best = (f64::INFINITY, f64::NAN);
        for threshold in [0.5, 1.5, 2.5] {
            let left: Vec<usize> = (0..4).filter(|&i| x.at(&[i, 0]) <= threshold).collect();
            let right: Vec<usize> = (0..4).filter(|&i| x.at(&[i, 0]) > threshold).collect();
            let count = |idx: &[usize]| {
                let ones = idx.iter().filter(|&&i| y[i] == 1).count();
                (idx.len() - ones, ones)
            };
            let (lz, lo) = count(&left);
            let (rz, ro) = count(&right);
            let weighted =
                (left.len() as f64 * gini(lz, lo) + right.len() as f64 * gini(rz, ro)) / 4.0;
            if weighted < best.0 {
                best = (weighted, threshold);
            }
        }
        assert_eq!(best.1, 1.5, "enumeration oracle picks the pure split");

        let mut r = rng::stream(0, "rf-test", 0);
        let tree = grow_tree(&x, &y, &[0, 1, 2, 3], 11, 1, &mut r).unwrap();
        let TreeNode::Split { feature, threshold, .. } = &tree.nodes[0] else {
            panic!("root must split");
        };
        assert_eq!(*feature, 0);
        assert_eq!(*threshold, 1.5);
        for i in 0..4 {
            assert_eq!(tree.predict(&[x.at(&[i, 0])]), y[i]);
        }
    }

    #[test]
    fn alternating_labels_respect_the_depth_cap() {
        let rows: Vec<(Vec<Elem>, u8)> =
            (0..16).map(|i| (vec![i as Elem], (i % 2) as u8)).collect();
        let (x, y) = design(&rows);
        let all: Vec<usize> = (0..16).collect();
        let mut r = rng::stream(1, "rf-depth", 0);
        let capped = grow_tree(&x, &y, &all, 11, 1, &mut r).unwrap();
        assert!(capped.depth() <= 11, "depth {}", capped.depth());
        let mut r = rng::stream(1, "rf-depth", 0);
        let free = grow_tree(&x, &y, &all, 20, 1, &mut r).unwrap();
        assert!(free.depth() > 11, "uncapped depth {} shows the cap was binding", free.depth());
        let forest = rf_train(&x, &y, 20, 11, 3).unwrap();
        assert!(forest.trees.iter().all(|t| t.depth() <= 11));
    }

    #[test]
    fn single_class_data_predicts_that_class_unanimously() {
        for class in [0u8, 1] {
            let rows: Vec<(Vec<Elem>, u8)> =
                (0..6).map(|i| (vec![i as Elem, (i * i) as Elem], class)).collect();
            let (x, y) = design(&rows);
            let model = rf_train(&x, &y, 25, 11, 0).unwrap();
            let (label, frac) = rf_predict(&model, &[2.5, 4.0]).unwrap();
            assert_eq!(label, class);
            assert_eq!(frac, 1.0);
        }
    }

    #[test]
    fn splits_never_increase_impurity() {
        let rows: Vec<(Vec<Elem>, u8)> = (0..30)
            .map(|i| {
                let v = i as Elem * 0.37;
                (vec![v.sin(), v.cos(), v % 1.3], u8::from(v.sin() + 0.2 * v.cos() > 0.0))
            })
            .collect();
        let (x, y) = design(&rows);
        let model = rf_train(&x, &y, 10, 11, 7).unwrap();
        for (tree, bag) in model.trees.iter().zip(&model.bootstrap) {
            // Route the bag down the tree, checking impurity at every split.
            let mut stack = vec![(0usize, bag.clone())];
            while let Some((at, idx)) = stack.pop() {
                let TreeNode::Split { feature, threshold, left, right } = &tree.nodes[at] else {
                    continue;
                };
                let ones = idx.iter().filter(|&&i| y[i] == 1).count();
                let parent = gini(idx.len() - ones, ones);
                let (li, ri): (Vec<usize>, Vec<usize>) =
                    idx.iter().partition(|&&i| x.at(&[i, *feature]) <= *threshold);
                assert!(!li.is_empty() && !ri.is_empty(), "degenerate split");
                let count = |s: &[usize]| {
                    let o = s.iter().filter(|&&i| y[i] == 1).count();
                    (s.len() - o, o)
                };
                let (lz, lo) = count(&li);
                let (rz, ro) = count(&ri);
                let weighted = (li.len() as f64 * gini(lz, lo)
                    + ri.len() as f64 * gini(rz, ro))
                    / idx.len() as f64;
                assert!(
                    weighted <= parent + 1e-12,
                    "split raised impurity: {weighted} > {parent}"
                );
                stack.push((*left, li));
                stack.push((*right, ri));
            }
        }
    }

    #[test]
    fn forest_shape_votes_and_determinism() {
        let rows: Vec<(Vec<Elem>, u8)> = (0..20)
            .map(|i| (vec![(i as Elem * 0.711).sin(), i as Elem], (i % 3 == 0) as u8))
            .collect();
        let (x, y) = design(&rows);
        let model = rf_train(&x, &y, 100, 11, 5).unwrap();
        assert_eq!(model.trees.len(), 100);
        assert_eq!(model.bootstrap.len(), 100);
        assert!(model.bootstrap.iter().all(|b| b.len() == 20));
        assert_ne!(model.bootstrap[0], model.bootstrap[1]);
        for probe in [[0.1, 3.0], [-0.4, 11.0], [0.9, 16.0]] {
            let (_, frac) = rf_predict(&model, &probe).unwrap();
            let scaled = frac * 100.0;
            assert!((scaled - scaled.round()).abs() < 1e-9, "fraction {frac} not a vote count");
            assert!((0.0..=1.0).contains(&frac));
            let ones = rf_ones_fraction(&model, &probe).unwrap();
            assert!((0.0..=1.0).contains(&ones));
        }
        let again = rf_train(&x, &y, 100, 11, 5).unwrap();
        assert_eq!(model, again);
        let other_seed = rf_train(&x, &y, 100, 11, 6).unwrap();
        assert_ne!(model.bootstrap, other_seed.bootstrap);
    }

    #[test]
    fn exact_vote_tie_goes_to_label_zero() {
        let model = RfModel {
            trees: vec![
                Tree { nodes: vec![TreeNode::Leaf { label: 0 }] },
                Tree { nodes: vec![TreeNode::Leaf { label: 1 }] },
            ],
            bootstrap: vec![vec![0], vec![0]],
            n_features: 1,
            max_depth: 11,
            mtry: 1,
            seed: 0,
        };
        let (label, frac) = rf_predict(&model, &[0.0]).unwrap();
        assert_eq!(label, 0);
        assert_eq!(frac, 0.5);
        assert_eq!(rf_ones_fraction(&model, &[0.0]).unwrap(), 0.5);
    }

    #[test]
    fn rejects_malformed_inputs() {
        let (x, y) = design(&[(vec![0.0], 0), (vec![1.0], 1)]);
        assert!(rf_train(&x, &y, 0, 11, 0).is_err());
        assert!(rf_train(&x, &y, 10, 0, 0).is_err());
        assert!(rf_train(&x, &[0], 10, 11, 0).is_err());
        assert!(rf_train(&x, &[0, 2], 10, 11, 0).is_err());
        let single = Tensor::new(&[1, 1], vec![0.0]).unwrap();
        assert!(rf_train(&single, &[0], 10, 11, 0).is_err());
        let model = rf_train(&x, &y, 5, 11, 0).unwrap();
        assert!(rf_predict(&model, &[0.0, 1.0]).is_err());
        let mut r = rng::stream(0, "rf-bad", 0);
        assert!(grow_tree(&x, &y, &[], 11, 1, &mut r).is_err());
        assert!(grow_tree(&x, &y, &[5], 11, 1, &mut r).is_err());
        assert!(grow_tree(&x, &y, &[0, 1], 11, 2, &mut r).is_err());
    }
}
