use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::team::TeamPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafStats {
    pub count: usize,
    pub instance_fraction: f64,
    pub human_error_rate: f64,
    /// Machine-alone error rate of each named system inside the leaf.
    pub machine_error_rates: BTreeMap<String, f64>,
}

/// Internal nodes send `x[feature_index] <= threshold` left; leaves carry statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub feature_index: Option<usize>,
    pub threshold: Option<f64>,
    pub left: Option<Box<TreeNode>>,
    pub right: Option<Box<TreeNode>>,
    pub leaf_stats: Option<LeafStats>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.leaf_stats.is_some()
    }

    pub fn leaves(&self) -> Vec<&LeafStats> {
        match (&self.left, &self.right, &self.leaf_stats) {
            (Some(l), Some(r), _) => {
                let mut v = l.leaves();
                v.extend(r.leaves());
                v
            }
            (_, _, Some(s)) => vec![s],
            _ => vec![],
        }
    }

    pub fn depth(&self) -> usize {
        match (&self.left, &self.right) {
            (Some(l), Some(r)) => 1 + l.depth().max(r.depth()),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRegionTree {
    pub max_depth: usize,
    pub min_leaf_fraction: f64,
    pub root: TreeNode,
}

impl ErrorRegionTree {
    /// Leaf index for `x`, counting leaves left to right.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        fn walk(node: &TreeNode, x: &[f64], offset: usize) -> usize {
            match (&node.left, &node.right, node.feature_index, node.threshold) {
                (Some(l), Some(r), Some(f), Some(t)) => {
                    if x[f] <= t {
                        walk(l, x, offset)
                    } else {
                        walk(r, x, offset + l.leaves().len())
                    }
                }
                _ => offset,
            }
        }
        walk(&self.root, x, 0)
    }
}

fn gini(errors: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = errors as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct Builder<'a> {
    data: &'a Dataset,
    /// `h ≠ y` per instance.
    target: Vec<bool>,
    machine_wrong: Vec<(String, Vec<bool>)>,
    min_leaf: usize,
    max_depth: usize,
}

impl Builder<'_> {
    fn leaf(&self, idx: &[usize]) -> TreeNode {
        let n = idx.len();
        let rate = |v: &[bool]| {
            if n == 0 {
                0.0
            } else {
                idx.iter().filter(|&&i| v[i]).count() as f64 / n as f64
            }
        };
        TreeNode {
            feature_index: None,
            threshold: None,
            left: None,
            right: None,
            leaf_stats: Some(LeafStats {
                count: n,
                instance_fraction: n as f64 / self.data.len() as f64,
                human_error_rate: rate(&self.target),
                machine_error_rates: self
                    .machine_wrong
                    .iter()
                    .map(|(name, v)| (name.clone(), rate(v)))
                    .collect(),
            }),
        }
    }

    /// Best `(feature, threshold, weighted child impurity)`; lowest feature and threshold
    /// on ties.
    fn best_split(&self, idx: &[usize]) -> Option<(usize, f64, f64)> {
        let n = idx.len();
        let total_err = idx.iter().filter(|&&i| self.target[i]).count();
        let mut best: Option<(usize, f64, f64)> = None;
        let mut order = idx.to_vec();
        for f in 0..self.data.feature_dim() {
            let x = |i: usize| self.data.instances()[i].features[f];
            order.sort_by(|&a, &b| x(a).total_cmp(&x(b)).then(a.cmp(&b)));
            let mut left_err = 0;
            for split in 1..n {
                left_err += usize::from(self.target[order[split - 1]]);
                let (lo, hi) = (x(order[split - 1]), x(order[split]));
                if lo == hi || split < self.min_leaf || n - split < self.min_leaf {
                    continue;
                }
                let impurity = (split as f64 * gini(left_err, split)
                    + (n - split) as f64 * gini(total_err - left_err, n - split))
                    / n as f64;
                if best.is_none_or(|(_, _, b)| impurity < b) {
                    best = Some((f, 0.5 * (lo + hi), impurity));
                }
            }
        }
        best
    }

    fn grow(&self, idx: Vec<usize>, depth: usize) -> TreeNode {
        let n = idx.len();
        let errors = idx.iter().filter(|&&i| self.target[i]).count();
        let parent = gini(errors, n);
        if depth >= self.max_depth || parent == 0.0 {
            return self.leaf(&idx);
        }
        match self.best_split(&idx) {
            Some((f, t, impurity)) if impurity < parent => {
                let (l, r): (Vec<usize>, Vec<usize>) = idx
                    .iter()
                    .partition(|&&i| self.data.instances()[i].features[f] <= t);
                TreeNode {
                    feature_index: Some(f),
                    threshold: Some(t),
                    left: Some(Box::new(self.grow(l, depth + 1))),
                    right: Some(Box::new(self.grow(r, depth + 1))),
                    leaf_stats: None,
                }
            }
            _ => self.leaf(&idx),
        }
    }
}

/// Gini-impurity tree predicting human error (`h ≠ y`) from the features, with leaves
/// annotated by each system's machine-alone error rate.
pub fn human_error_tree(
    dataset: &Dataset,
    systems: &[(String, &dyn TeamPolicy)],
    max_depth: usize,
    min_leaf_fraction: f64,
) -> Result<ErrorRegionTree> {
    if max_depth < 1 {
        return Err(Error::Config("tree depth must be at least 1".into()));
    }
    if !(0.0..0.5).contains(&min_leaf_fraction) {
        return Err(Error::Config(format!(
            "min leaf fraction must lie in [0, 0.5), got {min_leaf_fraction}"
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Input(
            "cannot grow a tree on an empty dataset".into(),
        ));
    }
    let target = dataset
        .instances()
        .iter()
        .map(|i| i.human != i.label)
        .collect();
    let machine_wrong = systems
        .iter()
        .map(|(name, p)| {
            let wrong = dataset
                .instances()
                .iter()
                .map(|i| Ok(p.machine_predict(&i.features)? != i.label))
                .collect::<Result<Vec<bool>>>()?;
            Ok((name.clone(), wrong))
        })
        .collect::<Result<Vec<_>>>()?;
    let builder = Builder {
        data: dataset,
        target,
        machine_wrong,
        min_leaf: ((min_leaf_fraction * dataset.len() as f64).ceil() as usize).max(1),
        max_depth,
    };
    Ok(ErrorRegionTree {
        max_depth,
        min_leaf_fraction,
        root: builder.grow((0..dataset.len()).collect(), 0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Instance;

    fn dataset(points: &[(f64, f64, bool)]) -> Dataset {
        Dataset::new(
            points
                .iter()
                .map(|&(a, b, err)| Instance {
                    features: vec![a, b],
                    label: 0,
                    human: usize::from(err),
                })
                .collect(),
            2,
            "t",
        )
        .unwrap()
    }

    #[test]
    fn no_errors_gives_single_leaf() {
        let d = dataset(&[(0.0, 1.0, false), (1.0, 0.0, false)]);
        let t = human_error_tree(&d, &[], 2, 0.05).unwrap();
        assert!(t.root.is_leaf());
        assert_eq!(t.root.leaf_stats.as_ref().unwrap().human_error_rate, 0.0);
    }

    #[test]
    fn separable_errors_split_between_neighbours() {
        let pts: Vec<(f64, f64, bool)> = (0..20)
            .map(|i| (i as f64 * 0.1, ((i * 7) % 5) as f64, i >= 14))
            .collect();
        let d = dataset(&pts);
        let t = human_error_tree(&d, &[], 1, 0.05).unwrap();
        assert_eq!(t.root.feature_index, Some(0));
        let th = t.root.threshold.unwrap();
        assert!(th > 1.3 && th < 1.4, "{th}");
        let leaves = t.root.leaves();
        assert_eq!(leaves.len(), 2);
        assert_eq!(leaves[0].human_error_rate, 0.0);
        assert_eq!(leaves[1].human_error_rate, 1.0);
        let total: f64 = leaves.iter().map(|l| l.instance_fraction).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn min_leaf_and_depth_are_respected() {
        let pts: Vec<(f64, f64, bool)> = (0..40)
            .map(|i| (i as f64, (i % 3) as f64, i % 4 == 0 || i > 37))
            .collect();
        let d = dataset(&pts);
        let t = human_error_tree(&d, &[], 2, 0.2).unwrap();
        assert!(t.root.depth() <= 2);
        for leaf in t.root.leaves() {
            assert!(leaf.count >= 8);
        }
        let counts: usize = t.root.leaves().iter().map(|l| l.count).sum();
        assert_eq!(counts, 40);
        assert!(human_error_tree(&d, &[], 0, 0.05).is_err());
    }
}
