//! Discrimination metrics under right censoring, plus the paired tests used
//! to compare models across folds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cox_linear::{newton_path, MINIMAL_RIDGE, NEWTON_TOL};
use crate::dataset::{ColumnKind, FeatureMatrix, SurvivalDataset};
use crate::error::{Error, Result};
use crate::special::{chi2_upper, student_t_two_sided};

/// Comparable/concordant/tied pair counts for one event row `i`, over all
/// `j` with `t_j > t_i`, or `t_j == t_i` and `j` censored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PairCounts {
    pub comparable: u64,
    pub concordant: u64,
    pub tied: u64,
}

fn check_lengths(time: &[f64], event: &[bool], risk: &[f64]) -> Result<()> {
    if time.len() != event.len() || time.len() != risk.len() {
        return Err(Error::schema("time, event and risk lengths differ"));
    }
    if risk.iter().any(|r| !r.is_finite()) {
        return Err(Error::Numerical("non-finite risk score".into()));
    }
    Ok(())
}

struct Counter {
    tree: Vec<u64>,
}

impl Counter {
    fn new(n: usize) -> Self {
        Counter { tree: vec![0; n + 1] }
    }
    fn add(&mut self, pos: usize) {
        let mut i = pos + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }
    /// Count at positions `< pos`.
    fn prefix(&self, pos: usize) -> u64 {
        let mut s = 0;
        let mut i = pos;
        while i > 0 {
            s += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Per-event pair counts in `O(n log n)`, returned as (row, counts).
pub fn event_pair_counts(time: &[f64], event: &[bool], risk: &[f64]) -> Vec<(usize, PairCounts)> {
    let n = time.len();
    let mut levels: Vec<f64> = risk.to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let rank: Vec<usize> = risk
        .iter()
        .map(|r| levels.partition_point(|l| l < r))
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| time[b].total_cmp(&time[a]));
    let mut counter = Counter::new(levels.len());
    let mut inserted = 0u64;
    let mut out = Vec::new();
    let mut k = 0;
    while k < n {
        let t = time[order[k]];
        let mut end = k;
        while end < n && time[order[end]] == t {
            end += 1;
        }
        let group = &order[k..end];
        for &j in group.iter().filter(|&&j| !event[j]) {
            counter.add(rank[j]);
            inserted += 1;
        }
        for &i in group.iter().filter(|&&i| event[i]) {
            let below = counter.prefix(rank[i]);
            let at = counter.prefix(rank[i] + 1) - below;
            out.push((i, PairCounts { comparable: inserted, concordant: below, tied: at }));
        }
        for &i in group.iter().filter(|&&i| event[i]) {
            counter.add(rank[i]);
            inserted += 1;
        }
        k = end;
    }
    out.sort_by_key(|(i, _)| *i);
    out
}

/// Per-event pair counts by direct enumeration of all pairs.
pub fn event_pair_counts_naive(time: &[f64], event: &[bool], risk: &[f64]) -> Vec<(usize, PairCounts)> {
    let n = time.len();
    let mut out = Vec::new();
    for i in (0..n).filter(|&i| event[i]) {
        let mut c = PairCounts::default();
        for j in 0..n {
            if j == i {
                continue;
            }
            let comparable = time[i] < time[j] || (time[i] == time[j] && !event[j]);
            if comparable {
                c.comparable += 1;
                if risk[i] > risk[j] {
                    c.concordant += 1;
                } else if risk[i] == risk[j] {
                    c.tied += 1;
                }
            }
        }
        out.push((i, c));
    }
    out
}

fn c_from_counts(counts: &[(usize, PairCounts)]) -> Result<f64> {
    let (mut comp, mut conc, mut tied) = (0u64, 0u64, 0u64);
    for (_, c) in counts {
        comp += c.comparable;
        conc += c.concordant;
        tied += c.tied;
    }
    if comp == 0 {
        return Err(Error::Numerical("C undefined: no comparable pairs".into()));
    }
    Ok((2 * conc + tied) as f64 / (2 * comp) as f64)
}

/// Harrell's concordance index.
pub fn harrell_c(time: &[f64], event: &[bool], risk: &[f64]) -> Result<f64> {
    check_lengths(time, event, risk)?;
    c_from_counts(&event_pair_counts(time, event, risk))
}

/// Harrell's C by the quadratic pair loop; agrees exactly with [`harrell_c`].
pub fn harrell_c_naive(time: &[f64], event: &[bool], risk: &[f64]) -> Result<f64> {
    check_lengths(time, event, risk)?;
    c_from_counts(&event_pair_counts_naive(time, event, risk))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KmStep {
    pub time: f64,
    pub survival: f64,
    pub at_risk: usize,
    pub events: usize,
}

/// Kaplan-Meier curve with one step per distinct event time; S(0) = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub steps: Vec<KmStep>,
}

impl KmCurve {
    pub fn survival_at(&self, t: f64) -> f64 {
        let k = self.steps.partition_point(|s| s.time <= t);
        if k == 0 { 1.0 } else { self.steps[k - 1].survival }
    }

    /// Left limit `S(t-)`.
    pub fn survival_before(&self, t: f64) -> f64 {
        let k = self.steps.partition_point(|s| s.time < t);
        if k == 0 { 1.0 } else { self.steps[k - 1].survival }
    }
}

pub fn kaplan_meier(time: &[f64], event: &[bool]) -> Result<KmCurve> {
    if time.is_empty() {
        return Err(Error::invalid("Kaplan-Meier needs at least one row"));
    }
    if time.len() != event.len() {
        return Err(Error::schema("time and event lengths differ"));
    }
    let n = time.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| time[a].total_cmp(&time[b]));
    let mut steps = Vec::new();
    let mut s = 1.0;
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
            let at_risk = n - k;
            s *= 1.0 - d as f64 / at_risk as f64;
            steps.push(KmStep { time: t, survival: s, at_risk, events: d });
        }
        k = end;
    }
    Ok(KmCurve { steps })
}

/// Restricted mean survival time, the exact area under the step curve on [0, tau].
pub fn rmst(curve: &KmCurve, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::invalid("tau must be > 0"));
    }
    let mut area = 0.0;
    let mut prev_t = 0.0;
    let mut prev_s = 1.0;
    for step in curve.steps.iter().take_while(|s| s.time < tau) {
        area += prev_s * (step.time - prev_t);
        prev_t = step.time;
        prev_s = step.survival;
    }
    Ok(area + prev_s * (tau - prev_t))
}

/// Uno's IPCW concordance truncated at `tau`; censoring weights come from
/// the Kaplan-Meier curve of the training split with censoring as the event.
pub fn uno_c(
    train_time: &[f64],
    train_event: &[bool],
    test_time: &[f64],
    test_event: &[bool],
    test_risk: &[f64],
    tau: f64,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::invalid("tau must be > 0"));
    }
    check_lengths(test_time, test_event, test_risk)?;
    let flipped: Vec<bool> = train_event.iter().map(|e| !e).collect();
    let censoring = kaplan_meier(train_time, &flipped)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, c) in event_pair_counts(test_time, test_event, test_risk) {
        if test_time[i] >= tau || c.comparable == 0 {
            continue;
        }
        let g = censoring.survival_before(test_time[i]);
        if g <= 0.0 {
            return Err(Error::Numerical(format!(
                "censoring survival is zero before t = {}; choose a smaller tau",
                test_time[i]
            )));
        }
        let w = 1.0 / (g * g);
        num += w * (c.concordant as f64 + 0.5 * c.tied as f64);
        den += w * c.comparable as f64;
    }
    if den == 0.0 {
        return Err(Error::Numerical("C undefined: no comparable pairs before tau".into()));
    }
    Ok(num / den)
}

/// Observed-minus-expected, expected and hypergeometric variance of group A
/// events over the pooled event times.
pub fn logrank_terms(a: (&[f64], &[bool]), b: (&[f64], &[bool])) -> (f64, f64, f64) {
    let mut times: Vec<f64> = a
        .0
        .iter()
        .zip(a.1)
        .chain(b.0.iter().zip(b.1))
        .filter(|(_, e)| **e)
        .map(|(t, _)| *t)
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let (mut o, mut e, mut v) = (0.0, 0.0, 0.0);
    for &t in &times {
        let na = a.0.iter().filter(|x| **x >= t).count() as f64;
        let nb = b.0.iter().filter(|x| **x >= t).count() as f64;
        let da = a.0.iter().zip(a.1).filter(|(x, ev)| **x == t && **ev).count() as f64;
        let db = b.0.iter().zip(b.1).filter(|(x, ev)| **x == t && **ev).count() as f64;
        let n = na + nb;
        let d = da + db;
        o += da;
        e += d * na / n;
        if n > 1.0 {
            v += na * nb * d * (n - d) / (n * n * (n - 1.0));
        }
    }
    (o, e, v)
}

/// Two-group log-rank chi-square statistic and its 1-df p-value.
pub fn logrank_test(a: (&[f64], &[bool]), b: (&[f64], &[bool])) -> Result<(f64, f64)> {
    if a.0.is_empty() || b.0.is_empty() {
        return Err(Error::invalid("log-rank test needs two nonempty groups"));
    }
    let (o, e, v) = logrank_terms(a, b);
    if v <= 0.0 {
        return Ok((0.0, 1.0));
    }
    let stat = (o - e).powi(2) / v;
    Ok((stat, chi2_upper(stat, 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub fraction: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub hazard_ratio: f64,
    pub delta_rmst: f64,
    pub logrank_p: f64,
}

/// Size of the high-risk group for `fraction` of `n` rows.
fn top_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(1.0) as usize
}

/// Metrics of the high-risk group: the `ceil(fraction * n)` highest risks,
/// extended by every row tied with the smallest of them. Rows with an
/// observed event count as positives; a rate whose class is empty is 0.
pub fn top_fraction_metrics(
    time: &[f64],
    event: &[bool],
    risk: &[f64],
    fraction: f64,
    tau: f64,
) -> Result<GroupMetrics> {
    check_lengths(time, event, risk)?;
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid("fraction must lie in (0, 1)"));
    }
    let n = time.len();
    if n == 0 {
        return Err(Error::invalid("no rows"));
    }
    let mut sorted = risk.to_vec();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[n - top_count(n, fraction).min(n)];
    let top: Vec<bool> = risk.iter().map(|r| *r >= threshold).collect();
    let n_top = top.iter().filter(|t| **t).count();
    if n_top == 0 || n_top == n {
        return Err(Error::invalid("high-risk group or remainder is empty"));
    }

    let (mut tp, mut fp, mut tn, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    for (&t, &e) in top.iter().zip(event) {
        match (t, e) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, false) => tn += 1.0,
            (false, true) => fn_ += 1.0,
        }
    }
    let ratio = |a: f64, b: f64| if a + b > 0.0 { a / (a + b) } else { 0.0 };
    let sensitivity = ratio(tp, fn_);
    let specificity = ratio(tn, fp);

    let split = |want: bool| -> (Vec<f64>, Vec<bool>) {
        top.iter()
            .enumerate()
            .filter(|(_, t)| **t == want)
            .map(|(i, _)| (time[i], event[i]))
            .unzip()
    };
    let (tt, te) = split(true);
    let (rt, re) = split(false);
    let delta_rmst = rmst(&kaplan_meier(&tt, &te)?, tau)? - rmst(&kaplan_meier(&rt, &re)?, tau)?;
    let (_, logrank_p) = logrank_test((&tt, &te), (&rt, &re))?;
    let hazard_ratio = group_hazard_ratio(time, event, &top)?;

    Ok(GroupMetrics {
        fraction,
        sensitivity,
        specificity,
        fpr: 1.0 - specificity,
        fnr: 1.0 - sensitivity,
        hazard_ratio,
        delta_rmst,
        logrank_p,
    })
}

/// `exp(beta)` of a univariate Cox fit on the group indicator.
fn group_hazard_ratio(time: &[f64], event: &[bool], group: &[bool]) -> Result<f64> {
    if !event.iter().any(|e| *e) {
        return Ok(1.0);
    }
    let x = FeatureMatrix::new(
        vec!["group".into()],
        vec![group.iter().map(|g| if *g { 1.0 } else { 0.0 }).collect()],
    )?;
    let ds = SurvivalDataset::new(x, vec![ColumnKind::Boolean], time.to_vec(), event.to_vec())?;
    let beta = match newton_path(&ds, MINIMAL_RIDGE, 100, NEWTON_TOL) {
        Ok(fit) => fit.model.beta[0],
        // Separated groups drift towards infinity; keep the last iterate.
        Err(Error::NotConverged { last, .. }) => last[0],
        Err(e) => return Err(e),
    };
    Ok(beta.exp())
}

pub fn delta_c(c_train: f64, c_test: f64) -> f64 {
    c_train - c_test
}

/// Paired two-sided t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("paired t-test needs two equal-length samples of size >= 2"));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 || var.sqrt() <= 1e-15 * mean.abs() {
        return Ok(if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        });
    }
    let t = mean / (var / n).sqrt();
    Ok((t, student_t_two_sided(t, n - 1.0)))
}

/// Benjamini-Hochberg adjusted p-values in input order.
pub fn bh_fdr(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut q = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        running = running.min(p[i] * m as f64 / (rank + 1) as f64);
        q[i] = running.min(1.0);
    }
    q
}

/// Lower order statistic at quantile `q` of `values`.
pub fn lower_quantile(values: &[f64], q: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = ((s.len() - 1) as f64 * q).floor() as usize;
    s[pos.min(s.len() - 1)]
}

/// Outer-fold metric suite for one fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub harrell_c: f64,
    pub uno_c: f64,
    /// Harrell's C on the training split.
    pub train_c: f64,
    pub delta_c: f64,
    pub tau: f64,
    /// Keyed by the fraction as written, e.g. `"0.1"`.
    pub groups: BTreeMap<String, GroupMetrics>,
}

impl MetricReport {
    /// Flat `(name, value)` pairs in a fixed order.
    pub fn named_values(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("harrell_c".to_string(), self.harrell_c),
            ("uno_c".to_string(), self.uno_c),
            ("train_c".to_string(), self.train_c),
            ("delta_c".to_string(), self.delta_c),
            ("tau".to_string(), self.tau),
        ];
        for (f, g) in &self.groups {
            for (name, v) in [
                ("sensitivity", g.sensitivity),
                ("specificity", g.specificity),
                ("fpr", g.fpr),
                ("fnr", g.fnr),
                ("hazard_ratio", g.hazard_ratio),
                ("delta_rmst", g.delta_rmst),
                ("logrank_p", g.logrank_p),
            ] {
                out.push((format!("{name}@{f}"), v));
            }
        }
        out
    }
}

/// Observed times and events plus predicted risks of one split.
#[derive(Debug, Clone, Copy)]
pub struct ScoredSplit<'a> {
    pub time: &'a [f64],
    pub event: &'a [bool],
    pub risk: &'a [f64],
}

/// Full metric suite. `tau` defaults to the lower `tau_quantile` order
/// statistic of the test times.
pub fn evaluate_split(
    train: ScoredSplit<'_>,
    test: ScoredSplit<'_>,
    fractions: &[f64],
    tau: Option<f64>,
    tau_quantile: f64,
) -> Result<MetricReport> {
    if test.time.is_empty() {
        return Err(Error::invalid("empty test split"));
    }
    let tau = tau.unwrap_or_else(|| lower_quantile(test.time, tau_quantile));
    let harrell = harrell_c(test.time, test.event, test.risk)?;
    let train_c = harrell_c(train.time, train.event, train.risk)?;
    let uno = uno_c(train.time, train.event, test.time, test.event, test.risk, tau)?;
    let mut groups = BTreeMap::new();
    for &f in fractions {
        groups.insert(format!("{f}"), top_fraction_metrics(test.time, test.event, test.risk, f, tau)?);
    }
    Ok(MetricReport { harrell_c: harrell, uno_c: uno, train_c, delta_c: delta_c(train_c, harrell), tau, groups })
}
