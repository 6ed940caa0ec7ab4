//! Exact-greedy second-order regression trees.
//!
//! Splits maximise `1/2 [G_L^2/(H_L+l) + G_R^2/(H_R+l) - G^2/(H+l)]` over
//! gradient/hessian sums. With `g = -y`, `h = 1`, `l = 0` this is ordinary
//! least-squares regression, which the imputer relies on.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthPolicy {
    LeafWise { num_leaves: usize },
    DepthWise { max_depth: usize },
}

impl GrowthPolicy {
    /// Leaf budget used for complexity accounting: `num_leaves`, or
    /// `2^max_depth - 1` for depth-capped trees.
    pub fn leaf_budget(&self) -> usize {
        match *self {
            GrowthPolicy::LeafWise { num_leaves } => num_leaves,
            GrowthPolicy::DepthWise { max_depth } => (1usize << max_depth.min(62)) - 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Tree { nodes: vec![Node::Leaf { value }] }
    }

    /// Evaluates the tree on one row; values `<= threshold` go left.
    pub fn predict_with(&self, x: impl Fn(usize) -> f64) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => {
                    at = if x(feature) <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn predict_columns(&self, cols: &[&[f64]], row: usize) -> f64 {
        self.predict_with(|j| cols[j][row])
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
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
}

/// Row indices sorted by each feature, computed once and reused across trees.
#[derive(Debug, Clone)]
pub struct Presorted {
    sorted: Vec<Vec<usize>>,
}

impl Presorted {
    pub fn new(cols: &[&[f64]]) -> Self {
        let sorted = cols
            .iter()
            .map(|c| {
                let mut rows: Vec<usize> = (0..c.len()).collect();
                rows.sort_by(|&a, &b| c[a].total_cmp(&c[b]));
                rows
            })
            .collect();
        Presorted { sorted }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SplitParams {
    pub min_leaf: usize,
    pub lambda: f64,
}

const MIN_GAIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

struct Pending {
    node: usize,
    depth: usize,
    lists: Vec<Vec<usize>>,
    grad: f64,
    hess: f64,
    best: Option<Candidate>,
}

pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64) -> f64 {
    let g = gl + gr;
    let h = hl + hr;
    0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - g * g / (h + lambda))
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + 0.5 * (b - a);
    if m < b { m } else { a }
}

fn best_split(
    lists: &[Vec<usize>],
    cols: &[&[f64]],
    g: &[f64],
    h: &[f64],
    total_g: f64,
    total_h: f64,
    params: SplitParams,
) -> Option<Candidate> {
    let mut best: Option<Candidate> = None;
    for (j, rows) in lists.iter().enumerate() {
        let m = rows.len();
        if m < 2 * params.min_leaf.max(1) {
            continue;
        }
        let col = cols[j];
        let mut gl = 0.0;
        let mut hl = 0.0;
        for k in 0..m - 1 {
            let r = rows[k];
            gl += g[r];
            hl += h[r];
            let left = k + 1;
            if left < params.min_leaf || m - left < params.min_leaf {
                continue;
            }
            let (a, b) = (col[r], col[rows[k + 1]]);
            if a >= b {
                continue;
            }
            let gain = split_gain(gl, hl, total_g - gl, total_h - hl, params.lambda);
            if gain > MIN_GAIN && best.is_none_or(|c| gain > c.gain) {
                best = Some(Candidate { gain, feature: j, threshold: midpoint(a, b) });
            }
        }
    }
    best
}

fn leaf_value(g: f64, h: f64, lambda: f64) -> f64 {
    let denom = h + lambda;
    if denom > 0.0 { -g / denom } else { 0.0 }
}

/// Grows one tree on the rows flagged in `active` (all rows when `None`).
pub fn grow_presorted(
    presorted: &Presorted,
    cols: &[&[f64]],
    g: &[f64],
    h: &[f64],
    active: Option<&[bool]>,
    policy: GrowthPolicy,
    params: SplitParams,
) -> Tree {
    let lists: Vec<Vec<usize>> = match active {
        None => presorted.sorted.clone(),
        Some(mask) => presorted
            .sorted
            .iter()
            .map(|l| l.iter().copied().filter(|&r| mask[r]).collect())
            .collect(),
    };
    let (grad, hess) = match lists.first() {
        Some(rows) => rows.iter().fold((0.0, 0.0), |(a, b), &r| (a + g[r], b + h[r])),
        None => {
            // No features: sum over active rows directly.
            (0..g.len())
                .filter(|&r| active.is_none_or(|m| m[r]))
                .fold((0.0, 0.0), |(a, b), r| (a + g[r], b + h[r]))
        }
    };

    let mut nodes = vec![Node::Leaf { value: leaf_value(grad, hess, params.lambda) }];
    let max_depth = match policy {
        GrowthPolicy::DepthWise { max_depth } => max_depth,
        GrowthPolicy::LeafWise { .. } => usize::MAX,
    };
    let leaf_cap = match policy {
        GrowthPolicy::LeafWise { num_leaves } => num_leaves.max(1),
        GrowthPolicy::DepthWise { .. } => usize::MAX,
    };
    let can_split = |depth: usize| depth < max_depth;

    let root_best = if can_split(0) {
        best_split(&lists, cols, g, h, grad, hess, params)
    } else {
        None
    };
    let mut frontier = vec![Pending { node: 0, depth: 0, lists, grad, hess, best: root_best }];
    let mut n_leaves = 1;
    let mut in_left = vec![false; g.len()];

    while n_leaves < leaf_cap {
        // Leaf-wise: the frontier leaf with the largest gain. Depth-wise: the
        // shallowest splittable leaf (frontier is kept in creation order).
        let pick = match policy {
            GrowthPolicy::LeafWise { .. } => frontier
                .iter()
                .enumerate()
                .filter_map(|(i, p)| p.best.map(|b| (i, b.gain)))
                .fold(None, |acc: Option<(usize, f64)>, (i, gain)| match acc {
                    Some((_, bg)) if bg >= gain => acc,
                    _ => Some((i, gain)),
                })
                .map(|(i, _)| i),
            GrowthPolicy::DepthWise { .. } => frontier.iter().position(|p| p.best.is_some()),
        };
        let Some(pos) = pick else { break };
        let leaf = frontier.remove(pos);
        let cand = leaf.best.expect("picked leaves have a split");

        let col = cols[cand.feature];
        for &r in &leaf.lists[0] {
            in_left[r] = col[r] <= cand.threshold;
        }
        let mut left_lists = Vec::with_capacity(leaf.lists.len());
        let mut right_lists = Vec::with_capacity(leaf.lists.len());
        for l in &leaf.lists {
            let (a, b): (Vec<usize>, Vec<usize>) = l.iter().partition(|&&r| in_left[r]);
            left_lists.push(a);
            right_lists.push(b);
        }
        let (lg, lh) = left_lists[0].iter().fold((0.0, 0.0), |(a, b), &r| (a + g[r], b + h[r]));
        let (rg, rh) = (leaf.grad - lg, leaf.hess - lh);

        let left = nodes.len();
        let right = left + 1;
        nodes.push(Node::Leaf { value: leaf_value(lg, lh, params.lambda) });
        nodes.push(Node::Leaf { value: leaf_value(rg, rh, params.lambda) });
        nodes[leaf.node] = Node::Split {
            feature: cand.feature,
            threshold: cand.threshold,
            left,
            right,
        };
        n_leaves += 1;

        let depth = leaf.depth + 1;
        let mut children = Vec::with_capacity(2);
        for (node, lists, cg, ch) in [(left, left_lists, lg, lh), (right, right_lists, rg, rh)] {
            let best = if can_split(depth) {
                best_split(&lists, cols, g, h, cg, ch, params)
            } else {
                None
            };
            if best.is_some() {
                children.push(Pending { node, depth, lists, grad: cg, hess: ch, best });
            }
        }
        match policy {
            GrowthPolicy::DepthWise { .. } => frontier.extend(children),
            GrowthPolicy::LeafWise { .. } => {
                frontier.extend(children);
                frontier.sort_by_key(|p| p.node);
            }
        }
    }
    Tree { nodes }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> SplitParams {
        SplitParams { min_leaf: 1, lambda: 1.0 }
    }

    #[test]
    fn gain_formula_hand_value() {
        assert!((split_gain(2.0, 4.0, -2.0, 4.0, 1.0) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn no_positive_gain_gives_single_leaf() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let cols = vec![x.as_slice()];
        let g = vec![0.0; 4];
        let h = vec![1.0; 4];
        let t = grow_presorted(&Presorted::new(&cols), &cols, &g, &h, None,
            GrowthPolicy::LeafWise { num_leaves: 8 }, params());
        assert_eq!(t.nodes, vec![Node::Leaf { value: 0.0 }]);
    }

    #[test]
    fn one_split_policies_agree() {
        let a = vec![0.3, 0.1, 0.9, 0.5, 0.7, 0.2];
        let b = vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let cols = vec![a.as_slice(), b.as_slice()];
        let g = vec![1.0, 0.5, -1.0, 0.2, -0.7, 0.9];
        let h = vec![1.0; 6];
        let pre = Presorted::new(&cols);
        let lw = grow_presorted(&pre, &cols, &g, &h, None, GrowthPolicy::LeafWise { num_leaves: 2 }, params());
        let dw = grow_presorted(&pre, &cols, &g, &h, None, GrowthPolicy::DepthWise { max_depth: 1 }, params());
        assert_eq!(lw, dw);
        assert_eq!(lw.n_leaves(), 2);
    }

    #[test]
    fn least_squares_leaf_is_mean() {
        let x = vec![0.0, 0.0, 1.0, 1.0];
        let y = [2.0, 4.0, 10.0, 12.0];
        let cols = vec![x.as_slice()];
        let g: Vec<f64> = y.iter().map(|v| -v).collect();
        let h = vec![1.0; 4];
        let t = grow_presorted(&Presorted::new(&cols), &cols, &g, &h, None,
            GrowthPolicy::DepthWise { max_depth: 3 }, SplitParams { min_leaf: 1, lambda: 0.0 });
        assert_eq!(t.predict_columns(&cols, 0), 3.0);
        assert_eq!(t.predict_columns(&cols, 3), 11.0);
    }

    #[test]
    fn min_leaf_is_honoured() {
        let x: Vec<f64> = (0..20).map(f64::from).collect();
        let cols = vec![x.as_slice()];
        let g: Vec<f64> = (0..20).map(|i| if i < 3 { -5.0 } else { 1.0 }).collect();
        let h = vec![1.0; 20];
        let t = grow_presorted(&Presorted::new(&cols), &cols, &g, &h, None,
            GrowthPolicy::DepthWise { max_depth: 4 }, SplitParams { min_leaf: 5, lambda: 1.0 });
        let mut counts = std::collections::HashMap::new();
        for i in 0..20 {
            *counts.entry(t.predict_columns(&cols, i).to_bits()).or_insert(0) += 1;
        }
        assert!(counts.values().all(|c| *c >= 5), "{counts:?}");
    }

    #[test]
    fn leaf_budget_respected() {
        let x: Vec<f64> = (0..200).map(|i| ((i * 37) % 200) as f64).collect();
        let cols = vec![x.as_slice()];
        let g: Vec<f64> = (0..200).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let h = vec![1.0; 200];
        let t = grow_presorted(&Presorted::new(&cols), &cols, &g, &h, None,
            GrowthPolicy::LeafWise { num_leaves: 7 }, params());
        assert!(t.n_leaves() <= 7);
        let d = grow_presorted(&Presorted::new(&cols), &cols, &g, &h, None,
            GrowthPolicy::DepthWise { max_depth: 3 }, params());
        assert!(d.depth() <= 3);
    }

    #[test]
    fn leaf_budget_accounting() {
        assert_eq!(GrowthPolicy::DepthWise { max_depth: 3 }.leaf_budget(), 7);
        assert_eq!(GrowthPolicy::DepthWise { max_depth: 10 }.leaf_budget(), 1023);
        assert_eq!(GrowthPolicy::LeafWise { num_leaves: 127 }.leaf_budget(), 127);
    }
}
