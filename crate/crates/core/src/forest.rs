//! CART decision trees and random forests (stacking meta-learner).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 1 - sum(p_i^2) over the two classes.
pub fn gini(counts: (u64, u64)) -> Result<f64> {
    let total = counts.0 + counts.1;
    if total == 0 {
        return Err(Error::Contract("gini of an empty node".into()));
    }
    let p0 = counts.0 as f64 / total as f64;
    let p1 = counts.1 as f64 / total as f64;
    Ok(1.0 - p0 * p0 - p1 * p1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        normal: u64,
        broken: u64,
    },
}

impl TreeNode {
    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        match self {
            TreeNode::Leaf { normal, broken } => *broken as f64 / (normal + broken) as f64,
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if row[*feature] <= *threshold {
                    left.predict_proba(row)
                } else {
                    right.predict_proba(row)
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub tree_count: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features sampled per split; 0 means all.
    pub features_per_split: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            tree_count: 100,
            max_depth: 8,
            min_leaf: 2,
            features_per_split: 2, // ceil(sqrt(4)) for the 4 meta-features
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestParams {
    /// Single deterministic CART tree (tree_count 1, no bootstrap,
    /// exhaustive feature search).
    pub fn single_tree(max_depth: usize, min_leaf: usize, seed: u64) -> Self {
        ForestParams {
            tree_count: 1,
            max_depth,
            min_leaf,
            features_per_split: 0,
            bootstrap: false,
            seed,
        }
    }

    pub fn validate(&self, n_features: usize) -> Result<()> {
        if self.tree_count == 0 {
            return Err(Error::Contract("tree count must be >= 1".into()));
        }
        if self.features_per_split > n_features {
            return Err(Error::Contract(format!(
                "features_per_split {} exceeds feature count {}",
                self.features_per_split, n_features
            )));
        }
        Ok(())
    }
}

fn class_counts(rows: &[usize], y: &[usize]) -> (u64, u64) {
    let mut c = (0u64, 0u64);
    for &r in rows {
        if y[r] == 0 {
            c.0 += 1;
        } else {
            c.1 += 1;
        }
    }
    c
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    max_depth: usize,
    min_leaf: usize,
    features_per_split: usize,
}

impl TreeBuilder<'_> {
    fn build<R: Rng>(&self, rows: &[usize], depth: usize, rng: &mut R) -> TreeNode {
        let counts = class_counts(rows, self.y);
        let leaf = TreeNode::Leaf {
            normal: counts.0,
            broken: counts.1,
        };
        if counts.0 == 0 || counts.1 == 0 || depth >= self.max_depth {
            return leaf;
        }
        let d = self.x[0].len();
        let candidates: Vec<usize> = if self.features_per_split == 0 || self.features_per_split >= d
        {
            (0..d).collect()
        } else {
            // sample without replacement, then sort for deterministic
            // tie-breaking by feature index
            let mut pool: Vec<usize> = (0..d).collect();
            for i in (1..d).rev() {
                let j = rng.gen_range(0..=i);
                pool.swap(i, j);
            }
            let mut chosen = pool[..self.features_per_split].to_vec();
            chosen.sort_unstable();
            chosen
        };
        let parent_gini = gini(counts).unwrap();
        let total = rows.len() as f64;
        let mut best: Option<(f64, usize, f64)> = None; // (gain, feature, threshold)
        for &f in &candidates {
            let mut vals: Vec<(f64, usize)> = rows.iter().map(|&r| (self.x[r][f], self.y[r])).collect();
            vals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let total_counts = counts;
            let mut left = (0u64, 0u64);
            let mut i = 0;
            while i < vals.len() {
                // advance over ties in the feature value
                let v = vals[i].0;
                while i < vals.len() && vals[i].0 == v {
                    if vals[i].1 == 0 {
                        left.0 += 1;
                    } else {
                        left.1 += 1;
                    }
                    i += 1;
                }
                if i == vals.len() {
                    break;
                }
                let n_left = left.0 + left.1;
                let n_right = total_counts.0 + total_counts.1 - n_left;
                if (n_left as usize) < self.min_leaf || (n_right as usize) < self.min_leaf {
                    continue;
                }
                let right = (total_counts.0 - left.0, total_counts.1 - left.1);
                let threshold = (v + vals[i].0) / 2.0;
                let g = parent_gini
                    - (n_left as f64 / total) * gini(left).unwrap()
                    - (n_right as f64 / total) * gini(right).unwrap();
                let better = match best {
                    None => g > 1e-15,
                    Some((bg, bf, bt)) => {
                        g > bg + 1e-15
                            || ((g - bg).abs() <= 1e-15 && (f < bf || (f == bf && threshold < bt)))
                    }
                };
                if better {
                    best = Some((g, f, threshold));
                }
            }
        }
        let (_, feature, threshold) = match best {
            Some(b) => b,
            None => return leaf,
        };
        let (mut lrows, mut rrows) = (Vec::new(), Vec::new());
        for &r in rows {
            if self.x[r][feature] <= threshold {
                lrows.push(r);
            } else {
                rrows.push(r);
            }
        }
        TreeNode::Split {
            feature,
            threshold,
            left: Box::new(self.build(&lrows, depth + 1, rng)),
            right: Box::new(self.build(&rrows, depth + 1, rng)),
        }
    }
}

/// Recursive best-split CART fit by Gini gain; exact midpoint thresholds,
/// ties broken by lowest feature index then lowest threshold.
pub fn fit_tree(x: &[Vec<f64>], y: &[usize], params: &ForestParams) -> Result<TreeNode> {
    if x.is_empty() || y.len() != x.len() {
        return Err(Error::Contract(
            "fit_tree: empty input or label length mismatch".into(),
        ));
    }
    let d = x[0].len();
    if x.iter().any(|row| row.len() != d) {
        return Err(Error::Contract("fit_tree: ragged feature rows".into()));
    }
    params.validate(d)?;
    let builder = TreeBuilder {
        x,
        y,
        max_depth: params.max_depth,
        min_leaf: params.min_leaf,
        features_per_split: params.features_per_split,
    };
    let rows: Vec<usize> = (0..x.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    Ok(builder.build(&rows, 0, &mut rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub params: ForestParams,
    pub trees: Vec<TreeNode>,
    pub n_features: usize,
}

pub fn fit_forest(x: &[Vec<f64>], y: &[usize], params: &ForestParams) -> Result<Forest> {
    if x.is_empty() || y.len() != x.len() {
        return Err(Error::Contract(
            "fit_forest: empty input or label length mismatch".into(),
        ));
    }
    let d = x[0].len();
    if x.iter().any(|row| row.len() != d) {
        return Err(Error::Contract("fit_forest: ragged feature rows".into()));
    }
    params.validate(d)?;
    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut trees = Vec::with_capacity(params.tree_count);
    let builder = TreeBuilder {
        x,
        y,
        max_depth: params.max_depth,
        min_leaf: params.min_leaf,
        features_per_split: params.features_per_split,
    };
    for _ in 0..params.tree_count {
        let rows: Vec<usize> = if params.bootstrap {
            (0..n).map(|_| rng.gen_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        trees.push(builder.build(&rows, 0, &mut rng));
    }
    Ok(Forest {
        params: *params,
        trees,
        n_features: d,
    })
}

impl Forest {
    /// Mean leaf broken-probability and the thresholded class
    /// (ties at 0.5 resolve to broken).
    pub fn predict(&self, row: &[f64]) -> Result<(usize, f64)> {
        if row.len() != self.n_features {
            return Err(Error::Dimension(format!(
                "predict_forest: row width {} vs training width {}",
                row.len(),
                self.n_features
            )));
        }
        let p = self
            .trees
            .iter()
            .map(|t| t.predict_proba(row))
            .sum::<f64>()
            / self.trees.len() as f64;
        Ok((usize::from(p >= 0.5), p))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Forest> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
