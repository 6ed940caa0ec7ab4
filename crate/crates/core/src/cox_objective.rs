//! Cox partial likelihood with Breslow ties.
//!
//! [`grad_hess`] evaluates the gradient and diagonal hessian of the partial
//! log-likelihood in linear time once a [`RiskSetIndex`] has been built: the
//! risk-set denominators are suffix sums over time-sorted weights, and each
//! row's share of every event it was at risk for is a prefix sum over the
//! sorted event sequence. [`grad_hess_naive`] computes the same quantities by
//! explicit risk-set enumeration and exists to check the fast path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Guard added to every risk-set denominator before division.
pub const DENOM_EPS: f64 = 1e-12;
/// Risk scores are clipped to this magnitude before exponentiation.
pub const ETA_CLIP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSetIndex {
    /// `order[k]` is the original row at sorted position `k`.
    pub order: Vec<usize>,
    /// `rank[i]` is the sorted position of original row `i`.
    pub rank: Vec<usize>,
    /// Half-open `[start, end)` ranges of sorted positions sharing a time.
    pub tie_groups: Vec<(usize, usize)>,
    /// Sorted positions carrying an event, ascending.
    pub event_positions: Vec<usize>,
    pub(crate) sorted_time: Vec<f64>,
    pub(crate) sorted_event: Vec<bool>,
}

impl RiskSetIndex {
    pub fn n_rows(&self) -> usize {
        self.order.len()
    }

    pub fn n_events(&self) -> usize {
        self.event_positions.len()
    }

    pub fn sorted_time(&self) -> &[f64] {
        &self.sorted_time
    }

    pub fn sorted_event(&self) -> &[bool] {
        &self.sorted_event
    }

    /// Number of rows at risk (time >= t) at the time of sorted position `pos`.
    pub fn risk_set_size(&self, pos: usize) -> usize {
        let g = self
            .tie_groups
            .partition_point(|&(_, end)| end <= pos);
        self.n_rows() - self.tie_groups[g].0
    }
}

/// Sorts rows by time (stable) and groups tied times.
pub fn build_risk_index(time: &[f64], event: &[bool]) -> Result<RiskSetIndex> {
    if time.is_empty() {
        return Err(Error::invalid("risk index needs at least one row"));
    }
    if time.len() != event.len() {
        return Err(Error::schema("time and event lengths differ"));
    }
    if let Some(i) = time.iter().position(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::validation(format!("row {i}: time must be > 0")));
    }
    if !event.iter().any(|e| *e) {
        return Err(Error::validation("no events: partial likelihood undefined"));
    }
    let n = time.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| time[a].total_cmp(&time[b]));
    let mut rank = vec![0; n];
    for (k, &i) in order.iter().enumerate() {
        rank[i] = k;
    }
    let sorted_time: Vec<f64> = order.iter().map(|&i| time[i]).collect();
    let sorted_event: Vec<bool> = order.iter().map(|&i| event[i]).collect();

    let mut tie_groups = Vec::new();
    let mut start = 0;
    for k in 1..=n {
        if k == n || sorted_time[k] != sorted_time[start] {
            tie_groups.push((start, k));
            start = k;
        }
    }
    let event_positions = (0..n).filter(|&k| sorted_event[k]).collect();
    Ok(RiskSetIndex {
        order,
        rank,
        tie_groups,
        event_positions,
        sorted_time,
        sorted_event,
    })
}

/// Gradient and diagonal hessian of the partial log-likelihood.
///
/// `grad` is d(l)/d(eta) and `hess` is -d2(l)/d(eta)2 (non-negative), both
/// summed over events (not divided by n) and in original row order. `loss` is
/// -l/n.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

fn check_eta(idx: &RiskSetIndex, eta: &[f64]) -> Result<()> {
    if eta.len() != idx.n_rows() {
        return Err(Error::schema(format!(
            "{} risk scores for {} rows",
            eta.len(),
            idx.n_rows()
        )));
    }
    if let Some(i) = eta.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite risk score at row {i}")));
    }
    Ok(())
}

/// Clipped, max-shifted scores and their exponentials, in sorted order.
fn sorted_weights(idx: &RiskSetIndex, eta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let shifted: Vec<f64> = idx
        .order
        .iter()
        .map(|&i| eta[i].clamp(-ETA_CLIP, ETA_CLIP))
        .collect();
    let max = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = shifted.into_iter().map(|v| v - max).collect();
    let w = shifted.iter().map(|v| v.exp()).collect();
    (shifted, w)
}

/// Suffix sums of `w`, accumulated from the last position backwards.
fn suffix_sums(w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.len() + 1];
    for k in (0..w.len()).rev() {
        out[k] = out[k + 1] + w[k];
    }
    out.truncate(w.len());
    out
}

/// Log partial likelihood `l` (not negated, not normalised).
pub fn partial_log_likelihood(idx: &RiskSetIndex, eta: &[f64]) -> Result<f64> {
    check_eta(idx, eta)?;
    let (shifted, w) = sorted_weights(idx, eta);
    let suffix = suffix_sums(&w);
    let mut ll = 0.0;
    for &(start, end) in &idx.tie_groups {
        let log_denom = suffix[start].ln();
        for k in start..end {
            if idx.sorted_event[k] {
                ll += shifted[k] - log_denom;
            }
        }
    }
    Ok(ll)
}

pub fn grad_hess(idx: &RiskSetIndex, eta: &[f64]) -> Result<ObjectiveOutput> {
    check_eta(idx, eta)?;
    let n = idx.n_rows();
    let (shifted, w) = sorted_weights(idx, eta);
    let suffix = suffix_sums(&w);

    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut ll = 0.0;
    let mut a = 0.0;
    let mut b = 0.0;
    for &(start, end) in &idx.tie_groups {
        let denom = suffix[start];
        let inv = 1.0 / (denom + DENOM_EPS);
        let log_denom = denom.ln();
        for k in start..end {
            if idx.sorted_event[k] {
                a += inv;
                b += inv * inv;
                ll += shifted[k] - log_denom;
            }
        }
        for k in start..end {
            let row = idx.order[k];
            let wk = w[k];
            let delta = if idx.sorted_event[k] { 1.0 } else { 0.0 };
            grad[row] = delta - wk * a;
            hess[row] = (wk * a - wk * wk * b).max(0.0);
        }
    }
    Ok(ObjectiveOutput {
        loss: -ll / n as f64,
        grad,
        hess,
    })
}

/// Quadratic-time reference for [`grad_hess`]: every event's risk set is
/// enumerated by comparing times directly.
pub fn grad_hess_naive(idx: &RiskSetIndex, eta: &[f64]) -> Result<ObjectiveOutput> {
    check_eta(idx, eta)?;
    let n = idx.n_rows();
    let t = &idx.sorted_time;
    let clipped: Vec<f64> = idx
        .order
        .iter()
        .map(|&i| eta[i].clamp(-ETA_CLIP, ETA_CLIP))
        .collect();
    let max = clipped.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = clipped.iter().map(|v| (v - max).exp()).collect();

    // Denominator of every event, in ascending event order.
    let mut events: Vec<(f64, f64)> = Vec::new();
    let mut ll = 0.0;
    for i in 0..n {
        if !idx.sorted_event[i] {
            continue;
        }
        let mut s = 0.0;
        for m in (0..n).rev() {
            if t[m] >= t[i] {
                s += w[m];
            }
        }
        ll += (clipped[i] - max) - s.ln();
        events.push((t[i], s));
    }

    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    for j in 0..n {
        let mut a = 0.0;
        let mut b = 0.0;
        for &(ti, s) in &events {
            if ti <= t[j] {
                let inv = 1.0 / (s + DENOM_EPS);
                a += inv;
                b += inv * inv;
            }
        }
        let delta = if idx.sorted_event[j] { 1.0 } else { 0.0 };
        let row = idx.order[j];
        grad[row] = delta - w[j] * a;
        hess[row] = (w[j] * a - w[j] * w[j] * b).max(0.0);
    }
    Ok(ObjectiveOutput {
        loss: -ll / n as f64,
        grad,
        hess,
    })
}
