//! Random survival forest: log-rank splitting, Nelson-Aalen leaves and
//! ensemble-mortality risk scores.
//!
//! Split search sweeps each candidate feature once in sorted order. Moving a
//! row `r` into the left child changes the log-rank terms by closed-form
//! amounts:
//!
//! * `O += event_r`
//! * `E += NA(t_r)`, the node's Nelson-Aalen hazard at `t_r`
//! * `V = sum_t c_t n_L(t) n(t) - sum_t c_t n_L(t)^2`, where the second sum
//!   over pairs of left rows is `sum_{k,l} C(min(t_k, t_l))` with `C` the
//!   running sum of `c_t = d (n - d) / (n^2 (n - 1))`.
//!
//! A Fenwick tree over time ranks supplies the pair term in `O(log m)`, so a
//! feature costs `O(m log m)` rather than `O(m * event times)`.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureMatrix, SurvivalDataset};
use crate::error::{Error, Result};
use crate::metrics::logrank_terms;
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsfHyperparams {
    pub n_estimators: usize,
    pub max_depth: usize,
    #[serde(default = "default_min_node")]
    pub min_node_size: usize,
    /// Features tried per node; `ceil(sqrt(p))` when absent.
    #[serde(default)]
    pub mtry: Option<usize>,
    #[serde(default = "default_true")]
    pub bootstrap: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_min_node() -> usize {
    20
}
fn default_true() -> bool {
    true
}

impl RsfHyperparams {
    pub fn new(n_estimators: usize, max_depth: usize) -> Self {
        RsfHyperparams {
            n_estimators,
            max_depth,
            min_node_size: default_min_node(),
            mtry: None,
            bootstrap: true,
            seed: 0,
        }
    }

    /// `n_estimators x (2^max_depth - 1)`.
    pub fn complexity(&self) -> f64 {
        (self.n_estimators * ((1usize << self.max_depth.min(62)) - 1)) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForestNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        /// Nelson-Aalen (time, cumulative hazard) steps of the leaf rows.
        chf: Vec<(f64, f64)>,
        /// Leaf cumulative hazard summed over the model's event-time grid.
        mortality: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalTree {
    pub nodes: Vec<ForestNode>,
}

impl SurvivalTree {
    fn leaf_for(&self, cols: &[&[f64]], row: usize) -> &ForestNode {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                ForestNode::Split { feature, threshold, left, right } => {
                    at = if cols[*feature][row] <= *threshold { *left } else { *right };
                }
                leaf => return leaf,
            }
        }
    }

    pub fn root_split_feature(&self) -> Option<usize> {
        match self.nodes[0] {
            ForestNode::Split { feature, .. } => Some(feature),
            ForestNode::Leaf { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsfModel {
    pub feature_names: Vec<String>,
    pub event_time_grid: Vec<f64>,
    pub trees: Vec<SurvivalTree>,
}

/// Nelson-Aalen cumulative hazard steps at each distinct event time.
pub fn nelson_aalen(time: &[f64], event: &[bool]) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..time.len()).collect();
    order.sort_by(|&a, &b| time[a].total_cmp(&time[b]));
    let n = time.len();
    let mut steps = Vec::new();
    let mut cum = 0.0;
    let mut k = 0;
    while k < n {
        let t = time[order[k]];
        let mut end = k;
        let mut d = 0;
        while end < n && time[order[end]] == t {
            d += usize::from(event[order[end]]);
            end += 1;
        }
        if d > 0 {
            cum += d as f64 / (n - k) as f64;
            steps.push((t, cum));
        }
        k = end;
    }
    steps
}

fn step_value(steps: &[(f64, f64)], t: f64) -> f64 {
    let k = steps.partition_point(|s| s.0 <= t);
    if k == 0 { 0.0 } else { steps[k - 1].1 }
}

/// Squared standardised two-sample log-rank statistic `(O - E)^2 / V`, with
/// `O`, `E` counted on the left group. Zero when the variance vanishes.
pub fn logrank_split_statistic(left: (&[f64], &[bool]), right: (&[f64], &[bool])) -> f64 {
    let (o, e, v) = logrank_terms(left, right);
    if v > 0.0 { (o - e).powi(2) / v } else { 0.0 }
}

struct Fenwick {
    cnt: Vec<f64>,
    sum: Vec<f64>,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick { cnt: vec![0.0; n + 1], sum: vec![0.0; n + 1] }
    }

    fn add(&mut self, pos: usize, c: f64) {
        let mut i = pos + 1;
        while i < self.cnt.len() {
            self.cnt[i] += 1.0;
            self.sum[i] += c;
            i += i & i.wrapping_neg();
        }
    }

    /// (count, sum) over positions `< pos`.
    fn prefix(&self, pos: usize) -> (f64, f64) {
        let (mut c, mut s) = (0.0, 0.0);
        let mut i = pos;
        while i > 0 {
            c += self.cnt[i];
            s += self.sum[i];
            i -= i & i.wrapping_neg();
        }
        (c, s)
    }
}

/// Per-item quantities of one node used by the incremental sweep.
struct NodeHazards {
    time_rank: Vec<usize>,
    n_times: usize,
    na: Vec<f64>,
    cn: Vec<f64>,
    c: Vec<f64>,
}

fn node_hazards(items: &[usize], time: &[f64], event: &[bool]) -> NodeHazards {
    let m = items.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| time[items[a]].total_cmp(&time[items[b]]));
    let mut time_rank = vec![0; m];
    let mut na = vec![0.0; m];
    let mut cn = vec![0.0; m];
    let mut c = vec![0.0; m];
    let (mut cum_na, mut cum_cn, mut cum_c) = (0.0, 0.0, 0.0);
    let mut rank = 0;
    let mut k = 0;
    while k < m {
        let t = time[items[order[k]]];
        let mut end = k;
        let mut d = 0.0;
        while end < m && time[items[order[end]]] == t {
            if event[items[order[end]]] {
                d += 1.0;
            }
            end += 1;
        }
        let n = (m - k) as f64;
        if d > 0.0 {
            cum_na += d / n;
            if n > 1.0 {
                let ct = d * (n - d) / (n * n * (n - 1.0));
                cum_cn += ct * n;
                cum_c += ct;
            }
        }
        for &o in &order[k..end] {
            time_rank[o] = rank;
            na[o] = cum_na;
            cn[o] = cum_cn;
            c[o] = cum_c;
        }
        rank += 1;
        k = end;
    }
    NodeHazards { time_rank, n_times: rank, na, cn, c }
}

#[derive(Debug, Clone, Copy)]
struct SplitChoice {
    stat: f64,
    feature: usize,
    threshold: f64,
}

fn best_feature_split(
    items: &[usize],
    col: &[f64],
    event: &[bool],
    hz: &NodeHazards,
    min_node: usize,
) -> Option<(f64, f64)> {
    let m = items.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| col[items[a]].total_cmp(&col[items[b]]));
    let mut fw = Fenwick::new(hz.n_times);
    let (mut o, mut e, mut v1, mut q) = (0.0, 0.0, 0.0, 0.0);
    let mut best: Option<(f64, f64)> = None;
    for k in 0..m - 1 {
        let r = order[k];
        let rank = hz.time_rank[r];
        let (below_cnt, below_sum) = fw.prefix(rank);
        let (all_cnt, _) = fw.prefix(hz.n_times);
        let at_or_above = all_cnt - below_cnt;
        q += hz.c[r] + 2.0 * (hz.c[r] * at_or_above + below_sum);
        fw.add(rank, hz.c[r]);
        if event[items[r]] {
            o += 1.0;
        }
        e += hz.na[r];
        v1 += hz.cn[r];

        let left = k + 1;
        if left < min_node || m - left < min_node {
            continue;
        }
        let (a, b) = (col[items[r]], col[items[order[k + 1]]]);
        if a >= b {
            continue;
        }
        let v = v1 - q;
        if v <= 1e-12 {
            continue;
        }
        let stat = (o - e).powi(2) / v;
        if stat > 1e-12 && best.is_none_or(|(s, _)| stat > s) {
            let mid = a + 0.5 * (b - a);
            best = Some((stat, if mid < b { mid } else { a }));
        }
    }
    best
}

struct TreeBuilder<'a> {
    cols: &'a [&'a [f64]],
    time: &'a [f64],
    event: &'a [bool],
    grid: &'a [f64],
    hp: &'a RsfHyperparams,
    mtry: usize,
    nodes: Vec<ForestNode>,
}

impl TreeBuilder<'_> {
    fn leaf(&self, items: &[usize]) -> ForestNode {
        let t: Vec<f64> = items.iter().map(|&i| self.time[i]).collect();
        let e: Vec<bool> = items.iter().map(|&i| self.event[i]).collect();
        let chf = nelson_aalen(&t, &e);
        let mortality = self.grid.iter().map(|&g| step_value(&chf, g)).sum();
        ForestNode::Leaf { chf, mortality }
    }

    fn build(&mut self, items: Vec<usize>, depth: usize, rng: &mut impl Rng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(ForestNode::Leaf { chf: Vec::new(), mortality: 0.0 });
        let min_node = self.hp.min_node_size.max(1);
        let has_event = items.iter().any(|&i| self.event[i]);
        let choice = if depth < self.hp.max_depth && items.len() >= 2 * min_node && has_event {
            self.choose(&items, rng)
        } else {
            None
        };
        match choice {
            None => self.nodes[id] = self.leaf(&items),
            Some(c) => {
                let col = self.cols[c.feature];
                let (l, r): (Vec<usize>, Vec<usize>) = items.iter().partition(|&&i| col[i] <= c.threshold);
                drop(items);
                let left = self.build(l, depth + 1, rng);
                let right = self.build(r, depth + 1, rng);
                self.nodes[id] = ForestNode::Split { feature: c.feature, threshold: c.threshold, left, right };
            }
        }
        id
    }

    fn choose(&self, items: &[usize], rng: &mut impl Rng) -> Option<SplitChoice> {
        let p = self.cols.len();
        let mut features = sample(rng, p, self.mtry).into_vec();
        features.sort_unstable();
        let hz = node_hazards(items, self.time, self.event);
        let mut best: Option<SplitChoice> = None;
        for j in features {
            if let Some((stat, threshold)) =
                best_feature_split(items, self.cols[j], self.event, &hz, self.hp.min_node_size.max(1))
            {
                if best.is_none_or(|b| stat > b.stat) {
                    best = Some(SplitChoice { stat, feature: j, threshold });
                }
            }
        }
        best
    }
}

pub fn fit_rsf(ds: &SurvivalDataset, hp: &RsfHyperparams) -> Result<RsfModel> {
    if ds.n_events() == 0 {
        return Err(Error::validation("random survival forest needs at least one event"));
    }
    if ds.features.has_missing() {
        return Err(Error::validation("features contain missing values; preprocess first"));
    }
    if hp.n_estimators == 0 {
        return Err(Error::invalid("n_estimators must be >= 1"));
    }
    let p = ds.features.n_cols();
    let mtry = hp.mtry.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize).min(p);
    if p > 0 && mtry == 0 {
        return Err(Error::invalid("mtry must be >= 1"));
    }
    let mut grid: Vec<f64> = ds
        .time
        .iter()
        .zip(&ds.event)
        .filter(|(_, e)| **e)
        .map(|(t, _)| *t)
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let cols: Vec<&[f64]> = ds.features.columns.iter().map(Vec::as_slice).collect();
    let n = ds.n_rows();
    let trees = (0..hp.n_estimators)
        .into_par_iter()
        .map(|t| {
            let mut rng = seeded(hp.seed.wrapping_add(t as u64));
            let items: Vec<usize> = if hp.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let mut builder = TreeBuilder {
                cols: &cols,
                time: &ds.time,
                event: &ds.event,
                grid: &grid,
                hp,
                mtry,
                nodes: Vec::new(),
            };
            if p == 0 {
                builder.nodes.push(builder.leaf(&items));
            } else {
                builder.build(items, 0, &mut rng);
            }
            SurvivalTree { nodes: builder.nodes }
        })
        .collect();
    Ok(RsfModel {
        feature_names: ds.features.names.clone(),
        event_time_grid: grid,
        trees,
    })
}

/// Ensemble mortality: the averaged leaf cumulative hazard summed over the
/// training event-time grid.
pub fn predict_mortality(model: &RsfModel, x: &FeatureMatrix) -> Result<Vec<f64>> {
    let cols = x.aligned_columns(&model.feature_names)?;
    let k = model.trees.len() as f64;
    Ok((0..x.n_rows)
        .map(|i| {
            model
                .trees
                .iter()
                .map(|t| match t.leaf_for(&cols, i) {
                    ForestNode::Leaf { mortality, .. } => *mortality,
                    ForestNode::Split { .. } => unreachable!("leaf_for stops at leaves"),
                })
                .sum::<f64>()
                / k
        })
        .collect())
}

/// Ensemble cumulative hazard of every row evaluated on the event-time grid.
pub fn predict_chf(model: &RsfModel, x: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
    let cols = x.aligned_columns(&model.feature_names)?;
    let k = model.trees.len() as f64;
    Ok((0..x.n_rows)
        .map(|i| {
            let mut acc = vec![0.0; model.event_time_grid.len()];
            for t in &model.trees {
                if let ForestNode::Leaf { chf, .. } = t.leaf_for(&cols, i) {
                    for (a, &g) in acc.iter_mut().zip(&model.event_time_grid) {
                        *a += step_value(chf, g) / k;
                    }
                }
            }
            acc
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ColumnKind;

    #[test]
    fn logrank_hand_value() {
        let s = logrank_split_statistic((&[1.0, 2.0], &[true, true]), (&[3.0, 4.0], &[true, true]));
        let want = (2.0f64 - 5.0 / 6.0).powi(2) / (0.25 + 2.0 / 9.0);
        assert!((s - want).abs() < 1e-12);
        assert!((s - 2.88).abs() < 0.01);
    }

    #[test]
    fn logrank_degenerate_cases() {
        let same = logrank_split_statistic((&[1.0, 2.0], &[true, false]), (&[1.0, 2.0], &[true, false]));
        assert!(same.abs() < 1e-12);
        let none = logrank_split_statistic((&[1.0], &[false]), (&[2.0], &[false]));
        assert_eq!(none, 0.0);
    }

    #[test]
    fn nelson_aalen_hand_value() {
        let h = nelson_aalen(&[1.0, 2.0, 3.0], &[true, true, true]);
        let want = [1.0 / 3.0, 5.0 / 6.0, 11.0 / 6.0];
        for (s, w) in h.iter().zip(want) {
            assert!((s.1 - w).abs() < 1e-12);
        }
    }

    #[test]
    fn incremental_sweep_matches_direct_statistic() {
        let time = [5.0, 1.0, 3.0, 3.0, 2.0, 8.0, 6.0, 4.0, 7.0, 2.0];
        let event = [true, false, true, true, true, false, true, false, true, true];
        let x = [0.3, 0.9, 0.1, 0.5, 0.7, 0.2, 0.8, 0.4, 0.6, 0.0];
        let items: Vec<usize> = (0..10).collect();
        let hz = node_hazards(&items, &time, &event);
        let (stat, thr) = best_feature_split(&items, &x, &event, &hz, 1).unwrap();
        let mut best = 0.0f64;
        for &cut in &[0.05, 0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85] {
            let l: Vec<usize> = items.iter().copied().filter(|&i| x[i] <= cut).collect();
            let r: Vec<usize> = items.iter().copied().filter(|&i| x[i] > cut).collect();
            let lt: Vec<f64> = l.iter().map(|&i| time[i]).collect();
            let le: Vec<bool> = l.iter().map(|&i| event[i]).collect();
            let rt: Vec<f64> = r.iter().map(|&i| time[i]).collect();
            let re: Vec<bool> = r.iter().map(|&i| event[i]).collect();
            best = best.max(logrank_split_statistic((&lt, &le), (&rt, &re)));
        }
        assert!((stat - best).abs() < 1e-9 * best.max(1.0), "{stat} vs {best}");
        assert!(thr > 0.0 && thr < 0.9);
    }

    fn toy() -> SurvivalDataset {
        let x = FeatureMatrix::new(vec!["a".into()], vec![vec![0.1, 0.2, 0.3]]).unwrap();
        SurvivalDataset::new(x, vec![ColumnKind::Continuous], vec![1.0, 2.0, 3.0], vec![true; 3]).unwrap()
    }

    #[test]
    fn root_only_forest_scores_sum_of_steps() {
        let hp = RsfHyperparams { bootstrap: false, ..RsfHyperparams::new(1, 0) };
        let m = fit_rsf(&toy(), &hp).unwrap();
        let s = predict_mortality(&m, &toy().features).unwrap();
        for v in s {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_tree_leaves_scores_unchanged() {
        let hp = RsfHyperparams { min_node_size: 1, ..RsfHyperparams::new(3, 2) };
        let mut m = fit_rsf(&toy(), &hp).unwrap();
        let before = predict_mortality(&m, &toy().features).unwrap();
        m.trees.push(m.trees[0].clone());
        m.trees.push(m.trees[1].clone());
        m.trees.push(m.trees[2].clone());
        let after = predict_mortality(&m, &toy().features).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn complexity_accounting() {
        assert_eq!(RsfHyperparams::new(50, 3).complexity(), 350.0);
        assert_eq!(RsfHyperparams::new(200, 10).complexity(), 204_600.0);
    }
}
