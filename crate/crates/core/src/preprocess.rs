//! Train-only preprocessing: missingness filters, chained-equation tree
//! imputation, zero replacement, log-scaling and centering, outlier
//! exclusion, and variance/correlation filters.
//!
//! A [`PreprocessPlan`] is fitted on a training split and then applied
//! unchanged to any split. Plans serialize to JSON.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{is_missing, ColumnKind, FeatureMatrix, SurvivalDataset, MISSING};
use crate::error::{Error, Result};
use crate::tree::{grow_presorted, GrowthPolicy, Presorted, SplitParams, Tree};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub var_min: f64,
    pub corr_max: f64,
    pub miss_col: f64,
    pub miss_row: f64,
    pub outlier_sd: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { var_min: 0.01, corr_max: 0.99, miss_col: 0.20, miss_row: 0.20, outlier_sd: 5.0 }
    }
}

pub const IMPUTER_DEPTH: usize = 8;
pub const IMPUTER_MIN_LEAF: usize = 10;
pub const IMPUTER_SWEEPS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnTransform {
    None,
    /// `(x - mean) / sd` without a log.
    Center { mean: f64, sd: f64 },
    /// `(ln x - mean) / sd`.
    LogCenter { mean: f64, sd: f64 },
    /// Zero training variance; maps everything to 0.
    Constant,
}

impl ColumnTransform {
    fn apply(&self, x: f64) -> Option<f64> {
        match *self {
            ColumnTransform::None => Some(x),
            ColumnTransform::Center { mean, sd } => Some((x - mean) / sd),
            ColumnTransform::LogCenter { mean, sd } => (x > 0.0).then(|| (x.ln() - mean) / sd),
            ColumnTransform::Constant => Some(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputeStep {
    pub column: usize,
    /// Indices of the predictor columns; tree feature `k` is `predictors[k]`.
    pub predictors: Vec<usize>,
    pub tree: Tree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputerModel {
    pub columns: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    /// Initial fill: training mean, or majority value for Boolean columns.
    pub fill: Vec<f64>,
    pub steps: Vec<ImputeStep>,
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessPlan {
    /// Columns surviving the missingness filter; all must be present at apply time.
    pub input_columns: Vec<String>,
    pub input_kinds: Vec<ColumnKind>,
    pub kept_columns: Vec<String>,
    /// One transform per input column.
    pub transforms: Vec<ColumnTransform>,
    pub zero_replacement: BTreeMap<String, f64>,
    pub biochemical: Vec<String>,
    pub imputer: ImputerModel,
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowExclusion {
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub dropped_columns_missingness: Vec<String>,
    pub dropped_rows_missingness: Vec<usize>,
    pub dropped_rows_outlier: Vec<RowExclusion>,
    pub dropped_columns_variance: Vec<String>,
    pub dropped_columns_correlation: Vec<String>,
}

fn missing_fraction(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|v| is_missing(**v)).count() as f64 / values.len() as f64
}

fn mean_sd(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

fn round_boolean(kind: ColumnKind, v: f64) -> f64 {
    match kind {
        ColumnKind::Boolean => {
            if v >= 0.5 {
                1.0
            } else {
                0.0
            }
        }
        ColumnKind::Continuous => v,
    }
}

/// Fits a chained-equation imputer: one least-squares tree per column with
/// missing values, visited in ascending missingness order, for
/// `iterations` sweeps. The trees of the final sweep are kept.
pub fn fit_imputer(ds: &SurvivalDataset, iterations: usize, seed: u64) -> ImputerModel {
    let p = ds.features.n_cols();
    let cols = &ds.features.columns;
    let fill: Vec<f64> = cols
        .iter()
        .zip(&ds.kinds)
        .map(|(c, k)| {
            let (m, _) = mean_sd(c.iter().copied().filter(|v| !is_missing(*v)));
            round_boolean(*k, m)
        })
        .collect();
    let mut order: Vec<(usize, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (c.iter().filter(|v| is_missing(**v)).count(), j))
        .filter(|(m, _)| *m > 0)
        .collect();
    order.sort();

    let mut current: Vec<Vec<f64>> = cols
        .iter()
        .zip(&fill)
        .map(|(c, f)| c.iter().map(|v| if is_missing(*v) { *f } else { *v }).collect())
        .collect();
    let params = SplitParams { min_leaf: IMPUTER_MIN_LEAF, lambda: 0.0 };
    let policy = GrowthPolicy::DepthWise { max_depth: IMPUTER_DEPTH };
    let mut steps = Vec::new();
    for sweep in 0..iterations {
        for &(_, j) in &order {
            let observed: Vec<bool> = cols[j].iter().map(|v| !is_missing(*v)).collect();
            let predictors: Vec<usize> = (0..p).filter(|&k| k != j).collect();
            let pcols: Vec<&[f64]> = predictors.iter().map(|&k| current[k].as_slice()).collect();
            let g: Vec<f64> = current[j].iter().map(|v| -v).collect();
            let h = vec![1.0; g.len()];
            let tree = grow_presorted(&Presorted::new(&pcols), &pcols, &g, &h, Some(&observed), policy, params);
            let updates: Vec<(usize, f64)> = (0..observed.len())
                .filter(|&i| !observed[i])
                .map(|i| (i, round_boolean(ds.kinds[j], tree.predict_columns(&pcols, i))))
                .collect();
            for (i, v) in updates {
                current[j][i] = v;
            }
            if sweep + 1 == iterations {
                steps.push(ImputeStep { column: j, predictors, tree });
            }
        }
    }
    ImputerModel {
        columns: ds.features.names.clone(),
        kinds: ds.kinds.clone(),
        fill,
        steps,
        iterations,
        seed,
    }
}

/// Replaces every missing cell of the imputer's columns; observed cells are untouched.
pub fn impute(imputer: &ImputerModel, ds: &SurvivalDataset) -> Result<SurvivalDataset> {
    let idx: Vec<usize> = imputer
        .columns
        .iter()
        .map(|n| {
            ds.features
                .column_index(n)
                .ok_or_else(|| Error::schema(format!("missing required column '{n}'")))
        })
        .collect::<Result<_>>()?;
    let mut out = ds.clone();
    let missing: Vec<Vec<usize>> = idx
        .iter()
        .map(|&c| (0..ds.n_rows()).filter(|&i| is_missing(ds.features.columns[c][i])).collect())
        .collect();
    for (k, &c) in idx.iter().enumerate() {
        for &i in &missing[k] {
            out.features.columns[c][i] = imputer.fill[k];
        }
    }
    let passes = if imputer.steps.is_empty() { 0 } else { imputer.iterations };
    for _ in 0..passes {
        for step in &imputer.steps {
            let target = idx[step.column];
            let updates: Vec<(usize, f64)> = missing[step.column]
                .iter()
                .map(|&i| {
                    let v = step
                        .tree
                        .predict_with(|f| out.features.columns[idx[step.predictors[f]]][i]);
                    (i, round_boolean(imputer.kinds[step.column], v))
                })
                .collect();
            for (i, v) in updates {
                out.features.columns[target][i] = v;
            }
        }
    }
    Ok(out)
}

fn replace_zeros(ds: &mut SurvivalDataset, replacement: &BTreeMap<String, f64>) {
    for (name, value) in replacement {
        if let Some(j) = ds.features.column_index(name) {
            for v in ds.features.columns[j].iter_mut() {
                if *v == 0.0 {
                    *v = *value;
                }
            }
        }
    }
}

/// Fits the plan on `train`. `biochemical` names the columns that receive
/// zero replacement, log-scaling and the outlier rule.
pub fn fit_preprocessor(
    train: &SurvivalDataset,
    biochemical: &[String],
    seed: u64,
) -> Result<(PreprocessPlan, PreprocessReport)> {
    fit_preprocessor_with(train, biochemical, Thresholds::default(), seed)
}

pub fn fit_preprocessor_with(
    train: &SurvivalDataset,
    biochemical: &[String],
    thresholds: Thresholds,
    seed: u64,
) -> Result<(PreprocessPlan, PreprocessReport)> {
    if train.n_rows() == 0 {
        return Err(Error::invalid("training split is empty"));
    }
    let mut report = PreprocessReport::default();

    let mut retained = Vec::new();
    for (j, name) in train.features.names.iter().enumerate() {
        if missing_fraction(&train.features.columns[j]) > thresholds.miss_col {
            report.dropped_columns_missingness.push(name.clone());
        } else {
            retained.push(name.clone());
        }
    }
    if retained.is_empty() {
        return Err(Error::validation("empty predictor matrix"));
    }
    let ds = train.select_columns(&retained)?;

    let p = retained.len();
    let rows: Vec<usize> = (0..ds.n_rows())
        .filter(|&i| {
            let miss = (0..p).filter(|&j| is_missing(ds.features.columns[j][i])).count();
            let keep = miss as f64 / p as f64 <= thresholds.miss_row;
            if !keep {
                report.dropped_rows_missingness.push(i);
            }
            keep
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::validation("every training row exceeds the row missingness threshold"));
    }
    let mut ds = ds.select_rows(&rows);

    let is_bio = |name: &str| biochemical.iter().any(|b| b == name);
    let mut zero_replacement = BTreeMap::new();
    for (j, name) in retained.iter().enumerate() {
        if is_bio(name) && ds.kinds[j] == ColumnKind::Continuous {
            let mut observed: Vec<f64> =
                ds.features.columns[j].iter().copied().filter(|v| !is_missing(*v)).collect();
            zero_replacement.insert(name.clone(), median(&mut observed) / 10.0);
        }
    }
    replace_zeros(&mut ds, &zero_replacement);

    let imputer = fit_imputer(&ds, IMPUTER_SWEEPS, seed);
    let imputed = impute(&imputer, &ds)?;

    let transforms: Vec<ColumnTransform> = retained
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let col = &imputed.features.columns[j];
            if imputed.kinds[j] == ColumnKind::Boolean {
                return ColumnTransform::None;
            }
            let log = is_bio(name) || col.iter().all(|v| *v > 0.0);
            let (mean, sd) = if log {
                mean_sd(col.iter().filter(|v| **v > 0.0).map(|v| v.ln()))
            } else {
                mean_sd(col.iter().copied())
            };
            match (sd > 0.0 && sd.is_finite(), log) {
                (false, _) => ColumnTransform::Constant,
                (true, true) => ColumnTransform::LogCenter { mean, sd },
                (true, false) => ColumnTransform::Center { mean, sd },
            }
        })
        .collect();

    let mut plan = PreprocessPlan {
        input_columns: retained.clone(),
        input_kinds: ds.kinds.clone(),
        kept_columns: retained.clone(),
        transforms,
        zero_replacement,
        biochemical: biochemical.iter().filter(|b| retained.contains(b)).cloned().collect(),
        imputer,
        thresholds,
    };

    let (scaled, exclusions) = transform_rows(&plan, imputed)?;
    report.dropped_rows_outlier = exclusions
        .into_iter()
        .map(|e| RowExclusion { row: rows[e.row], reason: e.reason })
        .collect();

    let mut alive: Vec<usize> = Vec::new();
    for (j, name) in retained.iter().enumerate() {
        let (_, sd) = mean_sd(scaled.features.columns[j].iter().copied());
        if sd * sd < thresholds.var_min {
            report.dropped_columns_variance.push(name.clone());
        } else {
            alive.push(j);
        }
    }
    let mut dropped = vec![false; p];
    for (a, &i) in alive.iter().enumerate() {
        if dropped[i] {
            continue;
        }
        for &j in &alive[a + 1..] {
            if dropped[j] {
                continue;
            }
            let r = pearson(&scaled.features.columns[i], &scaled.features.columns[j]);
            if r.is_some_and(|r| r.abs() > thresholds.corr_max) {
                dropped[j] = true;
                report.dropped_columns_correlation.push(retained[j].clone());
            }
        }
    }
    plan.kept_columns = alive.iter().filter(|&&j| !dropped[j]).map(|&j| retained[j].clone()).collect();
    if plan.kept_columns.is_empty() {
        return Err(Error::validation("empty predictor matrix"));
    }
    Ok((plan, report))
}

/// Scales the plan's input columns of an imputed dataset and lists the rows
/// that fail the positivity or outlier rules. Rows are not removed.
fn transform_rows(plan: &PreprocessPlan, mut ds: SurvivalDataset) -> Result<(SurvivalDataset, Vec<RowExclusion>)> {
    let mut reasons: BTreeMap<usize, String> = BTreeMap::new();
    for (k, name) in plan.input_columns.iter().enumerate() {
        let j = ds
            .features
            .column_index(name)
            .ok_or_else(|| Error::schema(format!("missing required column '{name}'")))?;
        let bio = plan.biochemical.contains(name);
        let t = &plan.transforms[k];
        for (i, v) in ds.features.columns[j].iter_mut().enumerate() {
            match t.apply(*v) {
                Some(z) => {
                    if bio && z.abs() > plan.thresholds.outlier_sd {
                        reasons.entry(i).or_insert_with(|| format!("{name}: |z| = {:.3} exceeds limit", z.abs()));
                    }
                    *v = z;
                }
                None => {
                    reasons.entry(i).or_insert_with(|| format!("{name}: nonpositive value {v} cannot be log-scaled"));
                    *v = 0.0;
                }
            }
        }
    }
    let exclusions = reasons.into_iter().map(|(row, reason)| RowExclusion { row, reason }).collect();
    Ok((ds, exclusions))
}

/// Applies a fitted plan. Output rows are the input rows minus listed
/// exclusions, in input order; columns are the plan's kept columns.
pub fn apply_preprocessor(plan: &PreprocessPlan, ds: &SurvivalDataset) -> Result<(SurvivalDataset, PreprocessReport)> {
    let mut work = ds.select_columns(&plan.input_columns)?;
    work.kinds = plan.input_kinds.clone();
    replace_zeros(&mut work, &plan.zero_replacement);
    let imputed = impute(&plan.imputer, &work)?;
    let (scaled, exclusions) = transform_rows(plan, imputed)?;
    let excluded: Vec<usize> = exclusions.iter().map(|e| e.row).collect();
    let keep: Vec<usize> = (0..ds.n_rows()).filter(|i| excluded.binary_search(i).is_err()).collect();
    let out = scaled.select_rows(&keep).select_columns(&plan.kept_columns)?;
    let report = PreprocessReport { dropped_rows_outlier: exclusions, ..Default::default() };
    Ok((out, report))
}

impl PreprocessPlan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// One-hot encodes numeric-coded factor columns. `levels[name]` lists the
/// training levels with the reference level first; the reference gets no
/// column. Returns the encoded dataset and the number of cells holding a
/// level absent from `levels`, which encode as all zeros.
pub fn one_hot_encode(
    ds: &SurvivalDataset,
    factor_columns: &[String],
    levels: &BTreeMap<String, Vec<f64>>,
) -> Result<(SurvivalDataset, usize)> {
    let mut names = Vec::new();
    let mut columns = Vec::new();
    let mut kinds = Vec::new();
    let mut unseen = 0;
    for (j, name) in ds.features.names.iter().enumerate() {
        let col = &ds.features.columns[j];
        if !factor_columns.contains(name) {
            names.push(name.clone());
            columns.push(col.clone());
            kinds.push(ds.kinds[j]);
            continue;
        }
        let lv = levels
            .get(name)
            .ok_or_else(|| Error::schema(format!("no levels given for factor '{name}'")))?;
        unseen += col.iter().filter(|v| !is_missing(**v) && !lv.contains(v)).count();
        for level in lv.iter().skip(1) {
            names.push(format!("{name}_{level}"));
            columns.push(
                col.iter()
                    .map(|v| {
                        if is_missing(*v) {
                            MISSING
                        } else if v == level {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            );
            kinds.push(ColumnKind::Boolean);
        }
    }
    let features = FeatureMatrix::new(names, columns)?;
    let out = SurvivalDataset::new(features, kinds, ds.time.clone(), ds.event.clone())?;
    Ok((out, unseen))
}
