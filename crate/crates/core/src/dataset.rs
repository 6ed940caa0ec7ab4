//! Survival datasets: feature columns plus observed time and event indicator.
//!
//! Missing feature cells are stored as `NaN`; reading an empty CSV field
//! produces it and writing it back produces an empty field again.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

/// Sentinel stored for a missing feature value.
pub const MISSING: f64 = f64::NAN;

#[inline]
pub fn is_missing(v: f64) -> bool {
    v.is_nan()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Boolean,
}

impl ColumnKind {
    /// Boolean iff every observed value is 0 or 1. An all-missing column is
    /// treated as continuous.
    pub fn infer(values: &[f64]) -> Self {
        let mut seen = false;
        for &v in values.iter().filter(|v| !is_missing(**v)) {
            seen = true;
            if v != 0.0 && v != 1.0 {
                return ColumnKind::Continuous;
            }
        }
        if seen {
            ColumnKind::Boolean
        } else {
            ColumnKind::Continuous
        }
    }
}

/// Column-major feature matrix with named columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub n_rows: usize,
}

impl FeatureMatrix {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::schema(format!(
                "{} names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        let n_rows = columns.first().map_or(0, Vec::len);
        if let Some((i, _)) = columns.iter().enumerate().find(|(_, c)| c.len() != n_rows) {
            return Err(Error::schema(format!(
                "column '{}' has length {} (expected {n_rows})",
                names[i],
                columns[i].len()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::schema(format!("duplicate column name '{n}'")));
            }
        }
        Ok(FeatureMatrix { names, columns, n_rows })
    }

    /// Build from a row-major buffer.
    pub fn from_row_major(names: Vec<String>, n_rows: usize, data: &[f64]) -> Result<Self> {
        let p = names.len();
        if data.len() != n_rows * p {
            return Err(Error::schema(format!(
                "buffer of {} values does not match {n_rows} x {p}",
                data.len()
            )));
        }
        let columns = (0..p)
            .map(|j| (0..n_rows).map(|i| data[i * p + j]).collect())
            .collect();
        let mut m = FeatureMatrix::new(names, columns)?;
        m.n_rows = n_rows;
        Ok(m)
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.columns[col][row]
    }

    pub fn row(&self, row: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[row]).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            names: self.names.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&r| c[r]).collect())
                .collect(),
            n_rows: rows.len(),
        }
    }

    /// Reorder/subset columns to `names`, failing on the first absent one.
    pub fn align_to(&self, names: &[String]) -> Result<FeatureMatrix> {
        let mut columns = Vec::with_capacity(names.len());
        for n in names {
            let j = self
                .column_index(n)
                .ok_or_else(|| Error::schema(format!("missing feature column '{n}'")))?;
            columns.push(self.columns[j].clone());
        }
        Ok(FeatureMatrix {
            names: names.to_vec(),
            columns,
            n_rows: self.n_rows,
        })
    }

    /// Borrow columns in `names` order without copying.
    pub fn aligned_columns<'a>(&'a self, names: &[String]) -> Result<Vec<&'a [f64]>> {
        if self.names.as_slice() == names {
            return Ok(self.columns.iter().map(Vec::as_slice).collect());
        }
        names
            .iter()
            .map(|n| {
                self.column_index(n)
                    .map(|j| self.columns[j].as_slice())
                    .ok_or_else(|| Error::schema(format!("missing feature column '{n}'")))
            })
            .collect()
    }

    pub fn has_missing(&self) -> bool {
        self.columns.iter().flatten().any(|v| is_missing(*v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalDataset {
    pub features: FeatureMatrix,
    pub kinds: Vec<ColumnKind>,
    pub time: Vec<f64>,
    pub event: Vec<bool>,
}

impl SurvivalDataset {
    pub fn new(
        features: FeatureMatrix,
        kinds: Vec<ColumnKind>,
        time: Vec<f64>,
        event: Vec<bool>,
    ) -> Result<Self> {
        if kinds.len() != features.n_cols() {
            return Err(Error::schema("one column kind per feature column required"));
        }
        if time.len() != event.len() {
            return Err(Error::schema("time and event lengths differ"));
        }
        if features.n_cols() > 0 && features.n_rows != time.len() {
            return Err(Error::schema(format!(
                "features have {} rows but time has {}",
                features.n_rows,
                time.len()
            )));
        }
        if let Some(i) = time.iter().position(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::validation(format!(
                "row {i}: time must be finite and > 0 (got {})",
                time[i]
            )));
        }
        for (j, (kind, col)) in kinds.iter().zip(&features.columns).enumerate() {
            if *kind == ColumnKind::Boolean
                && col.iter().any(|v| !is_missing(*v) && *v != 0.0 && *v != 1.0)
            {
                return Err(Error::validation(format!(
                    "boolean column '{}' holds values other than 0/1",
                    features.names[j]
                )));
            }
        }
        let mut features = features;
        features.n_rows = time.len();
        Ok(SurvivalDataset { features, kinds, time, event })
    }

    /// Infers column kinds from the observed values.
    pub fn with_inferred_kinds(features: FeatureMatrix, time: Vec<f64>, event: Vec<bool>) -> Result<Self> {
        let kinds = features.columns.iter().map(|c| ColumnKind::infer(c)).collect();
        SurvivalDataset::new(features, kinds, time, event)
    }

    pub fn n_rows(&self) -> usize {
        self.time.len()
    }

    pub fn n_events(&self) -> usize {
        self.event.iter().filter(|e| **e).count()
    }

    pub fn column_names(&self) -> &[String] {
        &self.features.names
    }

    pub fn select_rows(&self, rows: &[usize]) -> SurvivalDataset {
        SurvivalDataset {
            features: self.features.select_rows(rows),
            kinds: self.kinds.clone(),
            time: rows.iter().map(|&r| self.time[r]).collect(),
            event: rows.iter().map(|&r| self.event[r]).collect(),
        }
    }

    pub fn select_columns(&self, names: &[String]) -> Result<SurvivalDataset> {
        let features = self.features.align_to(names)?;
        let kinds = names
            .iter()
            .map(|n| self.kinds[self.features.column_index(n).expect("aligned above")])
            .collect();
        Ok(SurvivalDataset {
            features,
            kinds,
            time: self.time.clone(),
            event: self.event.clone(),
        })
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("time,event");
        for n in &self.features.names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for i in 0..self.n_rows() {
            let _ = write!(out, "{},{}", self.time[i], u8::from(self.event[i]));
            for c in &self.features.columns {
                out.push(',');
                if !is_missing(c[i]) {
                    let _ = write!(out, "{}", c[i]);
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<SurvivalDataset> {
    parse_csv(&std::fs::read_to_string(path)?)
}

/// Parses the `time`/`event` CSV layout. Errors name the 1-based file line.
pub fn parse_csv(text: &str) -> Result<SurvivalDataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or(Error::Parse { row: 1, msg: "missing header row".into() })?;
    let header: Vec<&str> = header.split(',').map(str::trim).collect();
    let time_col = header
        .iter()
        .position(|h| *h == "time")
        .ok_or(Error::Parse { row: 1, msg: "no 'time' column".into() })?;
    let event_col = header
        .iter()
        .position(|h| *h == "event")
        .ok_or(Error::Parse { row: 1, msg: "no 'event' column".into() })?;
    let feature_cols: Vec<usize> = (0..header.len()).filter(|&j| j != time_col && j != event_col).collect();
    let names: Vec<String> = feature_cols.iter().map(|&j| header[j].to_string()).collect();

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); feature_cols.len()];
    let mut time = Vec::new();
    let mut event = Vec::new();
    for (lineno, line) in lines {
        let row = lineno + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != header.len() {
            return Err(Error::Parse {
                row,
                msg: format!("expected {} fields, found {}", header.len(), fields.len()),
            });
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Parse { row, msg: format!("'{s}' is not a number") })
        };
        let t = num(fields[time_col])?;
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::validation(format!("line {row}: time must be > 0 (got {t})")));
        }
        let e = match num(fields[event_col])? {
            0.0 => false,
            1.0 => true,
            x => return Err(Error::validation(format!("line {row}: event must be 0 or 1 (got {x})"))),
        };
        time.push(t);
        event.push(e);
        for (k, &j) in feature_cols.iter().enumerate() {
            let f = fields[j];
            columns[k].push(if f.is_empty() { MISSING } else { num(f)? });
        }
    }
    let features = FeatureMatrix::new(names, columns)?;
    SurvivalDataset::with_inferred_kinds(features, time, event)
}

/// Assignment of every row to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn n_rows(&self) -> usize {
        self.fold_of.len()
    }

    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| self.fold_of[i] != fold).collect()
    }
}

/// Uniform random partition into `k` folds whose sizes differ by at most one.
pub fn make_folds(n_rows: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::invalid(format!("fold count must be >= 2 (got {k})")));
    }
    if k > n_rows {
        return Err(Error::invalid(format!("cannot split {n_rows} rows into {k} folds")));
    }
    let mut perm: Vec<usize> = (0..n_rows).collect();
    perm.shuffle(&mut seeded(seed));
    let mut fold_of = vec![0; n_rows];
    for (pos, &row) in perm.iter().enumerate() {
        fold_of[row] = pos % k;
    }
    Ok(FoldAssignment { k, fold_of })
}

/// Simple random sample of `n` rows without replacement, in original order.
pub fn subsample(ds: &SurvivalDataset, n: usize, seed: u64) -> Result<SurvivalDataset> {
    if n == 0 || n > ds.n_rows() {
        return Err(Error::invalid(format!(
            "sample size {n} outside 1..={}",
            ds.n_rows()
        )));
    }
    let mut rows = rand::seq::index::sample(&mut seeded(seed), ds.n_rows(), n).into_vec();
    rows.sort_unstable();
    Ok(ds.select_rows(&rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskKind {
    Linear { beta: Vec<f64> },
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_rows: usize,
    pub n_continuous: usize,
    pub n_boolean: usize,
    pub risk: RiskKind,
    pub baseline_rate: f64,
    pub target_event_fraction: f64,
    pub seed: u64,
}

/// A synthetic dataset together with the true risk score of each row.
#[derive(Debug, Clone)]
pub struct SyntheticDraw {
    pub dataset: SurvivalDataset,
    pub oracle_risk: Vec<f64>,
}

const PILOT_ROWS: usize = 20_000;

// x0*x1 interaction, a step in x2 and an xor of two flags, normalised by the
// analytic mean and variance of the raw score.
const NL_MEAN: f64 = 0.75;
const NL_VAR: f64 = 1.5 * 1.5 + 0.25 + 0.25 * 0.25;

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if !(self.target_event_fraction > 0.0 && self.target_event_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "target_event_fraction must lie in (0, 1] (got {})",
                self.target_event_fraction
            )));
        }
        if !(self.baseline_rate > 0.0 && self.baseline_rate.is_finite()) {
            return Err(Error::invalid("baseline_rate must be > 0"));
        }
        if self.n_rows == 0 {
            return Err(Error::invalid("n_rows must be >= 1"));
        }
        match &self.risk {
            RiskKind::Linear { beta } if beta.len() != self.n_continuous + self.n_boolean => {
                Err(Error::invalid(format!(
                    "linear risk needs {} coefficients, got {}",
                    self.n_continuous + self.n_boolean,
                    beta.len()
                )))
            }
            RiskKind::Nonlinear if self.n_continuous < 3 || self.n_boolean < 2 => Err(Error::invalid(
                "nonlinear risk needs at least 3 continuous and 2 boolean features",
            )),
            _ => Ok(()),
        }
    }

    fn risk(&self, cont: &[f64], boolean: &[f64]) -> f64 {
        match &self.risk {
            RiskKind::Linear { beta } => cont
                .iter()
                .chain(boolean)
                .zip(beta)
                .map(|(x, b)| x * b)
                .sum(),
            RiskKind::Nonlinear => {
                let xor = if (boolean[0] != 0.0) != (boolean[1] != 0.0) { 1.0 } else { 0.0 };
                let step = if cont[2] > 0.0 { 1.0 } else { 0.0 };
                let raw = 1.5 * cont[0] * cont[1] + step + 0.5 * xor;
                (raw - NL_MEAN) / NL_VAR.sqrt()
            }
        }
    }

    /// Draws features, oracle risk and latent event times. Returns
    /// (row-major continuous, row-major boolean, risk, event time).
    fn draw_rows(&self, rng: &mut impl Rng, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let coin = Bernoulli::new(0.5).expect("valid probability");
        let mut cont = Vec::with_capacity(n * self.n_continuous);
        let mut boolean = Vec::with_capacity(n * self.n_boolean);
        let mut risk = Vec::with_capacity(n);
        let mut latent = Vec::with_capacity(n);
        for _ in 0..n {
            let c0 = cont.len();
            for _ in 0..self.n_continuous {
                cont.push(StandardNormal.sample(rng));
            }
            let b0 = boolean.len();
            for _ in 0..self.n_boolean {
                boolean.push(if coin.sample(rng) { 1.0 } else { 0.0 });
            }
            let eta = self.risk(&cont[c0..], &boolean[b0..]);
            let u: f64 = Open01.sample(rng);
            risk.push(eta);
            latent.push(-u.ln() / (self.baseline_rate * eta.exp()));
        }
        (cont, boolean, risk, latent)
    }
}

/// Finds the upper bound `c` of uniform censoring on (0, c) whose event
/// fraction on the pilot sample is closest to `target` from above.
fn calibrate_censoring(latent: &[f64], uniforms: &[f64], target: f64) -> f64 {
    let frac = |c: f64| {
        latent
            .iter()
            .zip(uniforms)
            .filter(|(t, u)| **t <= **u * c)
            .count() as f64
            / latent.len() as f64
    };
    let mut hi = latent.iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
    while frac(hi) < target {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticDraw> {
    spec.validate()?;
    let censor_bound = if spec.target_event_fraction >= 1.0 {
        f64::INFINITY
    } else {
        let mut pilot_rng = seeded(derive_seed(spec.seed, &[0x0050_494c_4f54]));
        let (_, _, _, latent) = spec.draw_rows(&mut pilot_rng, PILOT_ROWS);
        let uniforms: Vec<f64> = (0..PILOT_ROWS).map(|_| Open01.sample(&mut pilot_rng)).collect();
        calibrate_censoring(&latent, &uniforms, spec.target_event_fraction)
    };

    let n = spec.n_rows;
    let mut rng = seeded(spec.seed);
    let (cont, boolean, oracle_risk, latent) = spec.draw_rows(&mut rng, n);
    let mut time = Vec::with_capacity(n);
    let mut event = Vec::with_capacity(n);
    for &t in &latent {
        let u: f64 = Open01.sample(&mut rng);
        let c = u * censor_bound;
        time.push(t.min(c));
        event.push(t <= c);
    }

    let mut names = Vec::new();
    let mut columns = Vec::new();
    let mut kinds = Vec::new();
    for j in 0..spec.n_continuous {
        names.push(format!("x{j}"));
        columns.push((0..n).map(|i| cont[i * spec.n_continuous + j]).collect());
        kinds.push(ColumnKind::Continuous);
    }
    for j in 0..spec.n_boolean {
        names.push(format!("b{j}"));
        columns.push((0..n).map(|i| boolean[i * spec.n_boolean + j]).collect());
        kinds.push(ColumnKind::Boolean);
    }
    let dataset = SurvivalDataset::new(FeatureMatrix::new(names, columns)?, kinds, time, event)?;
    Ok(SyntheticDraw { dataset, oracle_risk })
}
