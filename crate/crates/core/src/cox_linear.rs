//! Linear Cox models.
//!
//! Penalty convention: [`fit_newton`] takes `ridge_alpha` on the summed
//! log-likelihood, maximising `l(b) - ridge_alpha/2 |b|^2`. The coordinate
//! descent solver works on the mean, minimising
//! `-l(b)/n + alpha * (l1_ratio |b|_1 + (1 - l1_ratio)/2 |b|^2)`. A pure ridge
//! fit with coordinate descent at `alpha` therefore matches Newton with
//! `ridge_alpha = n * alpha`.

use serde::{Deserialize, Serialize};

use crate::cox_objective::{build_risk_index, grad_hess, partial_log_likelihood, RiskSetIndex};
use crate::dataset::{FeatureMatrix, SurvivalDataset};
use crate::error::{Error, Result};

/// Ridge strength of the "unpenalised" Cox variant.
pub const MINIMAL_RIDGE: f64 = 1e-6;
pub const NEWTON_TOL: f64 = 1e-9;
pub const CD_TOL: f64 = 1e-7;
pub const CD_MAX_ITER: usize = 100;

/// `alphas = logspace(-3, 0, 5)`.
pub fn default_alphas() -> Vec<f64> {
    (0..5).map(|k| 10f64.powf(-3.0 + 0.75 * k as f64)).collect()
}

/// `l1_ratios = 0.1, 0.2, ..., 1.0`.
pub fn default_l1_ratios() -> Vec<f64> {
    (1..=10).map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub alpha: f64,
    pub l1_ratio: f64,
}

impl PenaltySpec {
    pub fn value(&self, beta: &[f64]) -> f64 {
        let l1: f64 = beta.iter().map(|b| b.abs()).sum();
        let l2: f64 = beta.iter().map(|b| b * b).sum();
        self.alpha * (self.l1_ratio * l1 + 0.5 * (1.0 - self.l1_ratio) * l2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub feature_names: Vec<String>,
    pub beta: Vec<f64>,
    /// Breslow cumulative baseline hazard as (time, H0) steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Vec<(f64, f64)>>,
}

impl CoxModel {
    pub fn zeros(feature_names: Vec<String>) -> Self {
        let beta = vec![0.0; feature_names.len()];
        CoxModel { feature_names, beta, baseline: None }
    }
}

/// Result of a Newton fit including the penalised log-likelihood after every
/// accepted iteration (first entry is the starting point).
#[derive(Debug, Clone)]
pub struct NewtonFit {
    pub model: CoxModel,
    pub trace: Vec<f64>,
    pub iterations: usize,
}

fn linear_predictor(cols: &[&[f64]], beta: &[f64], n: usize) -> Vec<f64> {
    let mut eta = vec![0.0; n];
    for (col, &b) in cols.iter().zip(beta) {
        if b != 0.0 {
            for (e, x) in eta.iter_mut().zip(col.iter()) {
                *e += b * x;
            }
        }
    }
    eta
}

fn check_complete(x: &FeatureMatrix) -> Result<()> {
    if x.has_missing() {
        return Err(Error::validation("features contain missing values; preprocess first"));
    }
    Ok(())
}

struct Derivatives {
    loglik: f64,
    score: Vec<f64>,
    /// Observed information, row-major p x p.
    info: Vec<f64>,
}

/// Log-likelihood, score and information at `beta` via reverse cumulative
/// sums over the sorted risk sets.
fn derivatives(idx: &RiskSetIndex, cols: &[&[f64]], beta: &[f64]) -> Derivatives {
    let n = idx.n_rows();
    let p = cols.len();
    let eta = linear_predictor(cols, beta, n);
    let max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let mut s0 = 0.0;
    let mut s1 = vec![0.0; p];
    let mut s2 = vec![0.0; p * p];
    let mut loglik = 0.0;
    let mut score = vec![0.0; p];
    let mut info = vec![0.0; p * p];
    let mut x = vec![0.0; p];
    for &(start, end) in idx.tie_groups.iter().rev() {
        for k in start..end {
            let row = idx.order[k];
            let w = (eta[row] - max).exp();
            for j in 0..p {
                x[j] = cols[j][row];
            }
            s0 += w;
            for a in 0..p {
                let wa = w * x[a];
                s1[a] += wa;
                for b in 0..=a {
                    s2[a * p + b] += wa * x[b];
                }
            }
        }
        let d = (start..end).filter(|&k| idx.sorted_event[k]).count();
        if d == 0 {
            continue;
        }
        let df = d as f64;
        loglik -= df * (s0.ln() + max);
        for k in start..end {
            if idx.sorted_event[k] {
                let row = idx.order[k];
                loglik += eta[row];
                for j in 0..p {
                    score[j] += cols[j][row];
                }
            }
        }
        for a in 0..p {
            let ma = s1[a] / s0;
            score[a] -= df * ma;
            for b in 0..=a {
                let v = df * (s2[a * p + b] / s0 - ma * s1[b] / s0);
                info[a * p + b] += v;
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            info[b * p + a] = info[a * p + b];
        }
    }
    Derivatives { loglik, score, info }
}

/// Solves `m x = rhs` for symmetric positive definite `m` (row-major).
fn cholesky_solve(m: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let p = rhs.len();
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut s = m[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * p + i] = s.sqrt();
            } else {
                l[i * p + j] = s / l[j * p + j];
            }
        }
    }
    let mut y = vec![0.0; p];
    for i in 0..p {
        let mut s = rhs[i];
        for k in 0..i {
            s -= l[i * p + k] * y[k];
        }
        y[i] = s / l[i * p + i];
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        let mut s = y[i];
        for k in i + 1..p {
            s -= l[k * p + i] * x[k];
        }
        x[i] = s / l[i * p + i];
    }
    Some(x)
}

/// Damped Newton maximisation of the ridge-penalised partial log-likelihood.
pub fn fit_newton(ds: &SurvivalDataset, ridge_alpha: f64, max_iter: usize, tol: f64) -> Result<CoxModel> {
    newton_path(ds, ridge_alpha, max_iter, tol).map(|f| f.model)
}

pub fn newton_path(ds: &SurvivalDataset, ridge_alpha: f64, max_iter: usize, tol: f64) -> Result<NewtonFit> {
    if !(ridge_alpha >= 0.0) {
        return Err(Error::invalid("ridge_alpha must be >= 0"));
    }
    check_complete(&ds.features)?;
    let idx = build_risk_index(&ds.time, &ds.event)?;
    let cols: Vec<&[f64]> = ds.features.columns.iter().map(Vec::as_slice).collect();
    let p = cols.len();
    let penalised = |d: &Derivatives, beta: &[f64]| {
        d.loglik - 0.5 * ridge_alpha * beta.iter().map(|b| b * b).sum::<f64>()
    };

    let mut beta = vec![0.0; p];
    let mut d = derivatives(&idx, &cols, &beta);
    let mut current = penalised(&d, &beta);
    let mut trace = vec![current];
    let model = |beta: Vec<f64>| CoxModel {
        feature_names: ds.features.names.clone(),
        beta,
        baseline: None,
    };
    if p == 0 {
        return Ok(NewtonFit { model: model(beta), trace, iterations: 0 });
    }

    for iter in 1..=max_iter {
        let score: Vec<f64> = d.score.iter().zip(&beta).map(|(s, b)| s - ridge_alpha * b).collect();
        if score.iter().all(|s| s.abs() < tol) {
            return Ok(NewtonFit { model: model(beta), trace, iterations: iter - 1 });
        }
        let mut info = d.info.clone();
        for j in 0..p {
            info[j * p + j] += ridge_alpha;
        }
        let step = cholesky_solve(&info, &score)
            .ok_or_else(|| Error::Numerical("singular information matrix despite ridge".into()))?;

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=20 {
            let cand: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            let cd = derivatives(&idx, &cols, &cand);
            let value = penalised(&cd, &cand);
            if value.is_finite() && value > current {
                accepted = Some((cand, cd, value));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, cd, value)) = accepted else {
            // No ascent direction left at working precision.
            return Ok(NewtonFit { model: model(beta), trace, iterations: iter });
        };
        let rel = (value - current).abs() / current.abs().max(1e-300);
        beta = cand;
        d = cd;
        current = value;
        trace.push(current);
        if rel < tol {
            return Ok(NewtonFit { model: model(beta), trace, iterations: iter });
        }
    }
    Err(Error::NotConverged { iterations: max_iter, last: beta })
}

fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// Cyclic coordinate descent on a quadratic expansion of the mean partial
/// log-likelihood, re-expanded in an outer loop.
pub fn fit_coordinate_descent(
    ds: &SurvivalDataset,
    penalty: PenaltySpec,
    max_iter: usize,
    tol: f64,
) -> Result<CoxModel> {
    if !(0.0..=1.0).contains(&penalty.l1_ratio) || !(penalty.alpha >= 0.0) {
        return Err(Error::invalid("alpha must be >= 0 and l1_ratio in [0, 1]"));
    }
    if penalty.l1_ratio > 0.0 && penalty.alpha <= 0.0 {
        return Err(Error::invalid("alpha must be > 0 when l1_ratio > 0"));
    }
    check_complete(&ds.features)?;
    let idx = build_risk_index(&ds.time, &ds.event)?;
    let cols: Vec<&[f64]> = ds.features.columns.iter().map(Vec::as_slice).collect();
    let n = ds.n_rows();
    let nf = n as f64;
    let p = cols.len();
    let l1 = penalty.alpha * penalty.l1_ratio;
    let l2 = penalty.alpha * (1.0 - penalty.l1_ratio);
    let objective = |beta: &[f64]| -> Result<f64> {
        let eta = linear_predictor(&cols, beta, n);
        Ok(-partial_log_likelihood(&idx, &eta)? / nf + penalty.value(beta))
    };

    let mut beta = vec![0.0; p];
    let mut current = objective(&beta)?;
    for _ in 0..max_iter {
        let eta0 = linear_predictor(&cols, &beta, n);
        let gh = grad_hess(&idx, &eta0)?;
        let g: Vec<f64> = gh.grad.iter().map(|v| -v / nf).collect();
        let h: Vec<f64> = gh.hess.iter().map(|v| v / nf).collect();
        let diag: Vec<f64> = cols
            .iter()
            .map(|c| c.iter().zip(&h).map(|(x, hi)| hi * x * x).sum())
            .collect();

        let mut cand = beta.clone();
        let mut shift = vec![0.0; n];
        for _ in 0..1000 {
            let mut max_change: f64 = 0.0;
            for j in 0..p {
                let denom = diag[j] + l2;
                if denom <= 0.0 {
                    continue;
                }
                let col = cols[j];
                let grad_j: f64 = col
                    .iter()
                    .zip(&g)
                    .zip(&h)
                    .zip(&shift)
                    .map(|(((x, gi), hi), si)| x * (gi + hi * si))
                    .sum();
                let new = soft_threshold(diag[j] * cand[j] - grad_j, l1) / denom;
                let change = new - cand[j];
                if change != 0.0 {
                    for (s, x) in shift.iter_mut().zip(col.iter()) {
                        *s += change * x;
                    }
                    cand[j] = new;
                    max_change = max_change.max(change.abs());
                }
            }
            if max_change < tol * 0.1 {
                break;
            }
        }

        // Backtrack if the quadratic model overshot.
        let mut value = objective(&cand)?;
        let mut halvings = 0;
        while value > current + 1e-15 * current.abs() && halvings < 30 {
            for (c, b) in cand.iter_mut().zip(&beta) {
                *c = 0.5 * (*c + b);
            }
            value = objective(&cand)?;
            halvings += 1;
        }
        let max_change = cand
            .iter()
            .zip(&beta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        beta = cand;
        current = value.min(current);
        if max_change < tol {
            return Ok(CoxModel {
                feature_names: ds.features.names.clone(),
                beta,
                baseline: None,
            });
        }
    }
    Err(Error::NotConverged { iterations: max_iter, last: beta })
}

/// `alpha` above which the lasso solution is identically zero.
pub fn lasso_alpha_max(ds: &SurvivalDataset) -> Result<f64> {
    let idx = build_risk_index(&ds.time, &ds.event)?;
    let gh = grad_hess(&idx, &vec![0.0; ds.n_rows()])?;
    Ok(ds
        .features
        .columns
        .iter()
        .map(|c| c.iter().zip(&gh.grad).map(|(x, g)| x * g).sum::<f64>().abs())
        .fold(0.0, f64::max)
        / ds.n_rows() as f64)
}

/// Breslow cumulative baseline hazard at each distinct event time.
pub fn breslow_baseline(model: &CoxModel, ds: &SurvivalDataset) -> Result<Vec<(f64, f64)>> {
    if !ds.event.iter().any(|e| *e) {
        return Ok(Vec::new());
    }
    let eta = predict_risk(model, &ds.features)?;
    let idx = build_risk_index(&ds.time, &ds.event)?;
    let w: Vec<f64> = idx.order.iter().map(|&i| eta[i].exp()).collect();
    let mut at_risk = vec![0.0; w.len() + 1];
    for k in (0..w.len()).rev() {
        at_risk[k] = at_risk[k + 1] + w[k];
    }
    let mut cum = 0.0;
    let mut steps = Vec::new();
    for &(start, end) in &idx.tie_groups {
        let d = (start..end).filter(|&k| idx.sorted_event[k]).count();
        if d > 0 {
            cum += d as f64 / at_risk[start];
            steps.push((idx.sorted_time[start], cum));
        }
    }
    Ok(steps)
}

pub fn predict_risk(model: &CoxModel, x: &FeatureMatrix) -> Result<Vec<f64>> {
    let cols = x.aligned_columns(&model.feature_names)?;
    Ok(linear_predictor(&cols, &model.beta, x.n_rows))
}
