//! Nested cross-validation benchmark: per-fold preprocessing, inner grid
//! search on Harrell's C, a timed final refit, the outer metric suite,
//! ranking, paired comparisons and the sample-size scaling experiment.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cox_linear::{
    default_alphas, default_l1_ratios, fit_coordinate_descent, fit_newton, predict_risk, CoxModel, PenaltySpec,
    CD_MAX_ITER, CD_TOL, MINIMAL_RIDGE, NEWTON_TOL,
};
use crate::dataset::{generate_synthetic, load_csv, make_folds, subsample, FeatureMatrix, SurvivalDataset, SynthSpec};
use crate::error::{Error, Result};
use crate::forest_survival::{fit_rsf, predict_mortality, RsfHyperparams, RsfModel};
use crate::gbt_survival::{self, fit_gbt, GbtHyperparams, GbtModel, GrowthPolicy};
use crate::metrics::{bh_fdr, evaluate_split, harrell_c, paired_t_test, MetricReport, ScoredSplit};
use crate::mlp_survival::{self, fit_mlp, MlpHyperparams, MlpModel};
use crate::preprocess::{apply_preprocessor, fit_preprocessor, PreprocessPlan};
use crate::rng::derive_seed;

pub const NEWTON_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    CoxPlain,
    CoxRidge,
    CoxLasso,
    CoxElasticNet,
    Rsf,
    GbtLeafWise,
    GbtDepthWise,
    Mlp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 8] = [
        ModelKind::CoxPlain,
        ModelKind::CoxRidge,
        ModelKind::CoxLasso,
        ModelKind::CoxElasticNet,
        ModelKind::Rsf,
        ModelKind::GbtLeafWise,
        ModelKind::GbtDepthWise,
        ModelKind::Mlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::CoxPlain => "cox_plain",
            ModelKind::CoxRidge => "cox_ridge",
            ModelKind::CoxLasso => "cox_lasso",
            ModelKind::CoxElasticNet => "cox_elastic_net",
            ModelKind::Rsf => "rsf",
            ModelKind::GbtLeafWise => "gbt_leaf_wise",
            ModelKind::GbtDepthWise => "gbt_depth_wise",
            ModelKind::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model kind '{s}'")))
    }
}

/// One point of a hyperparameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelParams {
    CoxPlain,
    /// Ridge weight on the summed log-likelihood scale.
    CoxRidge { alpha: f64 },
    /// Weights on the mean log-likelihood scale.
    CoxLasso { alpha: f64 },
    CoxElasticNet { alpha: f64, l1_ratio: f64 },
    Rsf(RsfHyperparams),
    Gbt(GbtHyperparams),
    Mlp(MlpHyperparams),
}

impl ModelParams {
    /// Trees: estimators times leaf budget; MLP: layers times width squared; linear: 0.
    pub fn complexity(&self) -> f64 {
        match self {
            ModelParams::Rsf(hp) => hp.complexity(),
            ModelParams::Gbt(hp) => hp.complexity(),
            ModelParams::Mlp(hp) => hp.complexity(),
            _ => 0.0,
        }
    }

    /// Fits on `ds`; `seed` replaces any seed stored in the parameters.
    pub fn fit(&self, ds: &SurvivalDataset, seed: u64) -> Result<FittedModel> {
        let newton = |alpha: f64| match fit_newton(ds, alpha, NEWTON_MAX_ITER, NEWTON_TOL) {
            Ok(m) => Ok(FittedModel::Cox(m)),
            Err(Error::NotConverged { last, .. }) => Ok(FittedModel::Cox(CoxModel {
                feature_names: ds.features.names.clone(),
                beta: last,
                baseline: None,
            })),
            Err(e) => Err(e),
        };
        let cd = |alpha: f64, l1_ratio: f64| {
            fit_coordinate_descent(ds, PenaltySpec { alpha, l1_ratio }, CD_MAX_ITER, CD_TOL).map(FittedModel::Cox)
        };
        match self {
            ModelParams::CoxPlain => newton(MINIMAL_RIDGE),
            ModelParams::CoxRidge { alpha } => newton(*alpha),
            ModelParams::CoxLasso { alpha } => cd(*alpha, 1.0),
            ModelParams::CoxElasticNet { alpha, l1_ratio } => cd(*alpha, *l1_ratio),
            ModelParams::Rsf(hp) => fit_rsf(ds, &RsfHyperparams { seed, ..hp.clone() }).map(FittedModel::Rsf),
            ModelParams::Gbt(hp) => fit_gbt(ds, &GbtHyperparams { seed, ..hp.clone() }).map(FittedModel::Gbt),
            ModelParams::Mlp(hp) => fit_mlp(ds, &MlpHyperparams { seed, ..hp.clone() }).map(FittedModel::Mlp),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum FittedModel {
    Cox(CoxModel),
    Gbt(GbtModel),
    Rsf(RsfModel),
    Mlp(MlpModel),
}

impl FittedModel {
    /// Risk scores; higher means earlier expected event.
    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        match self {
            FittedModel::Cox(m) => predict_risk(m, x),
            FittedModel::Gbt(m) => gbt_survival::predict(m, x),
            FittedModel::Rsf(m) => predict_mortality(m, x),
            FittedModel::Mlp(m) => mlp_survival::predict(m, x),
        }
    }

    pub fn feature_names(&self) -> &[String] {
        match self {
            FittedModel::Cox(m) => &m.feature_names,
            FittedModel::Gbt(m) => &m.feature_names,
            FittedModel::Rsf(m) => &m.feature_names,
            FittedModel::Mlp(m) => &m.feature_names,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Overrides for the non-tuned hyperparameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedParams {
    pub learning_rate: Option<f64>,
    pub min_leaf: Option<usize>,
    pub lambda_l2: Option<f64>,
    pub min_node_size: Option<usize>,
    pub mtry: Option<usize>,
    pub dropout: Option<f64>,
    pub batch_size: Option<usize>,
    pub lr_patience: Option<usize>,
    pub max_epochs: Option<usize>,
    pub max_lr_reductions: Option<usize>,
}

/// A model family with its tuned value lists. Absent lists take the default grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub kind: ModelKind,
    /// Label in reports; defaults to the kind name.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub alphas: Option<Vec<f64>>,
    #[serde(default)]
    pub l1_ratios: Option<Vec<f64>>,
    #[serde(default)]
    pub n_estimators: Option<Vec<usize>>,
    #[serde(default)]
    pub max_depth: Option<Vec<usize>>,
    #[serde(default)]
    pub num_leaves: Option<Vec<usize>>,
    #[serde(default)]
    pub num_layers: Option<Vec<usize>>,
    #[serde(default)]
    pub layer_size: Option<Vec<usize>>,
    #[serde(default)]
    pub fixed: FixedParams,
}

impl GridSpec {
    pub fn new(kind: ModelKind) -> Self {
        GridSpec {
            kind,
            name: None,
            alphas: None,
            l1_ratios: None,
            n_estimators: None,
            max_depth: None,
            num_leaves: None,
            num_layers: None,
            layer_size: None,
            fixed: FixedParams::default(),
        }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.name().to_string())
    }

    /// Grid points in grid order (outer list varies slowest).
    pub fn points(&self) -> Result<Vec<ModelParams>> {
        let or = |v: &Option<Vec<usize>>, d: &[usize]| v.clone().unwrap_or_else(|| d.to_vec());
        let alphas = self.alphas.clone().unwrap_or_else(default_alphas);
        let trees = or(&self.n_estimators, &[50, 100, 200]);
        let depths = or(&self.max_depth, &[3, 7, 10]);
        let f = &self.fixed;
        let gbt = |n: usize, policy: GrowthPolicy| {
            let mut hp = GbtHyperparams::new(n, policy);
            hp.learning_rate = f.learning_rate.unwrap_or(hp.learning_rate);
            hp.min_leaf = f.min_leaf.unwrap_or(hp.min_leaf);
            hp.lambda_l2 = f.lambda_l2.unwrap_or(hp.lambda_l2);
            ModelParams::Gbt(hp)
        };
        let points: Vec<ModelParams> = match self.kind {
            ModelKind::CoxPlain => vec![ModelParams::CoxPlain],
            ModelKind::CoxRidge => alphas.iter().map(|&alpha| ModelParams::CoxRidge { alpha }).collect(),
            ModelKind::CoxLasso => alphas.iter().map(|&alpha| ModelParams::CoxLasso { alpha }).collect(),
            ModelKind::CoxElasticNet => {
                let l1s = self.l1_ratios.clone().unwrap_or_else(default_l1_ratios);
                l1s.iter()
                    .flat_map(|&l1_ratio| alphas.iter().map(move |&alpha| ModelParams::CoxElasticNet { alpha, l1_ratio }))
                    .collect()
            }
            ModelKind::Rsf => trees
                .iter()
                .flat_map(|&n| {
                    depths.iter().map(move |&d| {
                        let mut hp = RsfHyperparams::new(n, d);
                        hp.min_node_size = f.min_node_size.unwrap_or(hp.min_node_size);
                        hp.mtry = f.mtry.or(hp.mtry);
                        ModelParams::Rsf(hp)
                    })
                })
                .collect(),
            ModelKind::GbtLeafWise => {
                let leaves = or(&self.num_leaves, &[7, 127, 1023]);
                trees
                    .iter()
                    .flat_map(|&n| leaves.iter().map(move |&l| gbt(n, GrowthPolicy::LeafWise { num_leaves: l })))
                    .collect()
            }
            ModelKind::GbtDepthWise => trees
                .iter()
                .flat_map(|&n| depths.iter().map(move |&d| gbt(n, GrowthPolicy::DepthWise { max_depth: d })))
                .collect(),
            ModelKind::Mlp => {
                let layers = or(&self.num_layers, &[2, 3, 5]);
                let sizes = or(&self.layer_size, &[16, 64, 256]);
                layers
                    .iter()
                    .flat_map(|&l| {
                        sizes.iter().map(move |&s| {
                            let mut hp = MlpHyperparams::new(l, s);
                            hp.learning_rate = f.learning_rate.unwrap_or(hp.learning_rate);
                            hp.dropout = f.dropout.unwrap_or(hp.dropout);
                            hp.batch_size = f.batch_size.unwrap_or(hp.batch_size);
                            hp.lr_patience = f.lr_patience.unwrap_or(hp.lr_patience);
                            hp.max_epochs = f.max_epochs.unwrap_or(hp.max_epochs);
                            hp.max_lr_reductions = f.max_lr_reductions.unwrap_or(hp.max_lr_reductions);
                            ModelParams::Mlp(hp)
                        })
                    })
                    .collect()
            }
        };
        if points.is_empty() {
            return Err(Error::invalid(format!("grid for {} is empty", self.label())));
        }
        Ok(points)
    }
}

/// Grid point complexity as used for tie-breaking.
pub fn complexity(point: &ModelParams) -> f64 {
    point.complexity()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Csv { path: PathBuf },
    Synthetic(SynthSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSet {
    pub name: String,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvSettings {
    #[serde(default = "five")]
    pub outer_k: usize,
    #[serde(default = "five")]
    pub inner_k: usize,
    #[serde(default)]
    pub seed: u64,
}

fn five() -> usize {
    5
}

impl Default for CvSettings {
    fn default() -> Self {
        CvSettings { outer_k: 5, inner_k: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSettings {
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    /// Fixed truncation time; the test-time quantile is used when absent.
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default = "default_tau_quantile")]
    pub tau_quantile: f64,
}

fn default_fractions() -> Vec<f64> {
    vec![0.1, 0.2]
}
fn default_tau_quantile() -> f64 {
    0.95
}

impl Default for MetricSettings {
    fn default() -> Self {
        MetricSettings { fractions: default_fractions(), tau: None, tau_quantile: default_tau_quantile() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    #[serde(default = "default_price")]
    pub price_per_hour: f64,
    #[serde(default = "default_cost_thresholds")]
    pub thresholds: Vec<f64>,
}

fn default_price() -> f64 {
    1.0
}
fn default_cost_thresholds() -> Vec<f64> {
    vec![0.1, 0.01]
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { price_per_hour: default_price(), thresholds: default_cost_thresholds() }
    }
}

impl CostModel {
    /// Fit duration in seconds that costs `threshold` at the configured price.
    pub fn threshold_seconds(&self, threshold: f64) -> f64 {
        threshold / self.price_per_hour * 3600.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Named column subsets; one set of all columns when empty.
    #[serde(default)]
    pub feature_sets: Vec<FeatureSet>,
    #[serde(default)]
    pub biochemical_columns: Vec<String>,
    pub models: Vec<GridSpec>,
    #[serde(default)]
    pub cv: CvSettings,
    #[serde(default)]
    pub metrics: MetricSettings,
    #[serde(default)]
    pub cost: CostModel,
    /// Write `timing.csv`; wall-clock values are the only nondeterministic output.
    #[serde(default = "default_true")]
    pub record_timing: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cv.outer_k < 2 || self.cv.inner_k < 2 {
            return Err(Error::invalid("outer_k and inner_k must be >= 2"));
        }
        if self.models.is_empty() {
            return Err(Error::invalid("config lists no models"));
        }
        for g in &self.models {
            g.points()?;
        }
        let mut labels: Vec<String> = self.models.iter().map(GridSpec::label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("model labels must be unique; set `name` to disambiguate"));
        }
        if self.metrics.fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(Error::invalid("fractions must lie in (0, 1)"));
        }
        if !(self.metrics.tau_quantile > 0.0 && self.metrics.tau_quantile <= 1.0) {
            return Err(Error::invalid("tau_quantile must lie in (0, 1]"));
        }
        if self.metrics.tau.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::invalid("tau must be > 0"));
        }
        if !(self.cost.price_per_hour > 0.0) {
            return Err(Error::invalid("price_per_hour must be > 0"));
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<SurvivalDataset> {
        match &self.dataset {
            DatasetSource::Csv { path } => load_csv(path),
            DatasetSource::Synthetic(spec) => Ok(generate_synthetic(spec)?.dataset),
        }
    }

    fn resolved_feature_sets(&self, ds: &SurvivalDataset) -> Vec<FeatureSet> {
        if self.feature_sets.is_empty() {
            vec![FeatureSet { name: "all".into(), columns: ds.features.names.clone() }]
        } else {
            self.feature_sets.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub model: String,
    pub feature_set: String,
    pub size: usize,
    pub outer_fold: usize,
    pub valid: bool,
    #[serde(default)]
    pub invalid_reason: Option<String>,
    #[serde(default)]
    pub chosen: Option<ModelParams>,
    #[serde(default)]
    pub inner_mean_c: Option<f64>,
    #[serde(default)]
    pub metrics: Option<MetricReport>,
    pub n_train: usize,
    pub n_test: usize,
    pub n_events_train: usize,
    pub n_events_test: usize,
    /// Outer-test rows removed by the outlier rule.
    pub n_test_excluded: usize,
    /// Wall-clock time of the final refit only.
    #[serde(skip)]
    pub fit_time_seconds: f64,
    #[serde(skip)]
    pub preprocess_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub feature_set: String,
    pub metric: String,
    pub n_folds: usize,
    pub mean: f64,
    pub sd: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub feature_set: String,
    pub outer_fold: usize,
    pub model: String,
    pub harrell_c: f64,
    pub rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRank {
    pub model: String,
    pub feature_set: String,
    pub mean_rank: f64,
}

/// Pairwise paired t-tests for one feature set. `p` is symmetric; `q` holds
/// Benjamini-Hochberg values over the off-diagonal pairs; the diagonal is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonMatrix {
    pub feature_set: String,
    pub metric: String,
    pub models: Vec<String>,
    pub p: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLine {
    pub threshold: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub size: usize,
    /// Total model fits performed, inner and final.
    pub n_fits: usize,
    pub folds: Vec<FoldResult>,
    pub summary: Vec<SummaryRow>,
    pub ranks: Vec<RankRow>,
    pub mean_ranks: Vec<MeanRank>,
    pub comparisons: Vec<ComparisonMatrix>,
    pub cost_lines: Vec<CostLine>,
    pub positive_class_note: String,
}

pub const POSITIVE_CLASS_NOTE: &str =
    "sensitivity/specificity count any observed event during follow-up as positive; censored rows count as negative";

const INNER: u64 = 1;
const MODEL: u64 = 2;
const PREPROCESS: u64 = 3;
const FINAL: u64 = u64::MAX;

struct Prepared {
    train: SurvivalDataset,
    test: SurvivalDataset,
    n_test_excluded: usize,
    seconds: f64,
}

fn invalid_result(base: &FoldResult, reason: String) -> FoldResult {
    FoldResult { valid: false, invalid_reason: Some(reason), ..base.clone() }
}

/// Runs the nested CV with the dataset named in the config.
pub fn run_nested_cv(config: &ExperimentConfig, threads: usize) -> Result<BenchmarkReport> {
    let ds = config.load_dataset()?;
    run_nested_cv_on(config, &ds, threads)
}

/// Runs the nested CV on `ds`. Results do not depend on `threads`.
pub fn run_nested_cv_on(config: &ExperimentConfig, ds: &SurvivalDataset, threads: usize) -> Result<BenchmarkReport> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| run_inner(config, ds))
}

fn run_inner(config: &ExperimentConfig, ds: &SurvivalDataset) -> Result<BenchmarkReport> {
    let seed = config.cv.seed;
    let outer = make_folds(ds.n_rows(), config.cv.outer_k, seed)?;
    let feature_sets = config.resolved_feature_sets(ds);
    let grids: Vec<(String, Vec<ModelParams>)> =
        config.models.iter().map(|g| Ok((g.label(), g.points()?))).collect::<Result<_>>()?;
    for fs in &feature_sets {
        ds.select_columns(&fs.columns)?;
    }

    let cells: Vec<(usize, usize)> = (0..feature_sets.len())
        .flat_map(|f| (0..config.cv.outer_k).map(move |k| (f, k)))
        .collect();
    let per_cell: Vec<(Vec<FoldResult>, usize)> = cells
        .par_iter()
        .map(|&(f, k)| run_cell(config, ds, &feature_sets[f], f, &outer.train_rows(k), &outer.test_rows(k), k, &grids))
        .collect::<Result<_>>()?;

    let n_fits = per_cell.iter().map(|(_, n)| n).sum();
    let folds: Vec<FoldResult> = per_cell.into_iter().flat_map(|(r, _)| r).collect();
    Ok(assemble_report(config, ds.n_rows(), n_fits, folds, &feature_sets, &grids))
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    config: &ExperimentConfig,
    ds: &SurvivalDataset,
    fs: &FeatureSet,
    fs_index: usize,
    train_rows: &[usize],
    test_rows: &[usize],
    fold: usize,
    grids: &[(String, Vec<ModelParams>)],
) -> Result<(Vec<FoldResult>, usize)> {
    let seed = config.cv.seed;
    let subset = ds.select_columns(&fs.columns)?;
    let raw_train = subset.select_rows(train_rows);
    let raw_test = subset.select_rows(test_rows);
    let base = |model: &str| FoldResult {
        model: model.to_string(),
        feature_set: fs.name.clone(),
        size: ds.n_rows(),
        outer_fold: fold,
        valid: true,
        invalid_reason: None,
        chosen: None,
        inner_mean_c: None,
        metrics: None,
        n_train: raw_train.n_rows(),
        n_test: raw_test.n_rows(),
        n_events_train: raw_train.n_events(),
        n_events_test: raw_test.n_events(),
        n_test_excluded: 0,
        fit_time_seconds: 0.0,
        preprocess_seconds: 0.0,
    };
    let all_invalid = |reason: String| -> Result<(Vec<FoldResult>, usize)> {
        Ok((grids.iter().map(|(m, _)| invalid_result(&base(m), reason.clone())).collect(), 0))
    };

    if raw_test.n_events() == 0 {
        return all_invalid("outer test fold has no events".into());
    }
    let prepared = match prepare(config, &raw_train, &raw_test, derive_seed(seed, &[PREPROCESS, fs_index as u64, fold as u64])) {
        Ok(p) => p,
        Err(e) => return all_invalid(format!("preprocessing failed: {e}")),
    };
    if prepared.test.n_events() == 0 {
        return all_invalid("outer test fold has no events after outlier exclusion".into());
    }
    let inner = match make_folds(prepared.train.n_rows(), config.cv.inner_k, derive_seed(seed, &[INNER, fold as u64])) {
        Ok(f) => f,
        Err(e) => return all_invalid(format!("inner folds: {e}")),
    };
    let inner_splits: Vec<(SurvivalDataset, SurvivalDataset)> = (0..config.cv.inner_k)
        .map(|j| (prepared.train.select_rows(&inner.train_rows(j)), prepared.train.select_rows(&inner.test_rows(j))))
        .collect();

    let results: Vec<(FoldResult, usize)> = grids
        .par_iter()
        .enumerate()
        .map(|(m, (label, points))| {
            let mut b = base(label);
            b.n_train = prepared.train.n_rows();
            b.n_test = prepared.test.n_rows();
            b.n_events_train = prepared.train.n_events();
            b.n_events_test = prepared.test.n_events();
            b.n_test_excluded = prepared.n_test_excluded;
            b.preprocess_seconds = prepared.seconds;
            run_model(config, &prepared, &inner_splits, fold, m, points, b)
        })
        .collect();
    let n_fits = results.iter().map(|(_, n)| n).sum();
    Ok((results.into_iter().map(|(r, _)| r).collect(), n_fits))
}

/// The preprocessing plan the harness fits for one (feature set, outer fold) cell.
pub fn fold_plan(config: &ExperimentConfig, ds: &SurvivalDataset, fs_index: usize, fold: usize) -> Result<PreprocessPlan> {
    let seed = config.cv.seed;
    let outer = make_folds(ds.n_rows(), config.cv.outer_k, seed)?;
    let sets = config.resolved_feature_sets(ds);
    let fs = sets.get(fs_index).ok_or_else(|| Error::invalid(format!("no feature set {fs_index}")))?;
    let train = ds.select_columns(&fs.columns)?.select_rows(&outer.train_rows(fold));
    cell_plan(config, &train, derive_seed(seed, &[PREPROCESS, fs_index as u64, fold as u64]))
}

fn cell_plan(config: &ExperimentConfig, train: &SurvivalDataset, seed: u64) -> Result<PreprocessPlan> {
    Ok(fit_preprocessor(train, &config.biochemical_columns, seed)?.0)
}

fn prepare(config: &ExperimentConfig, train: &SurvivalDataset, test: &SurvivalDataset, seed: u64) -> Result<Prepared> {
    let start = Instant::now();
    let plan = cell_plan(config, train, seed)?;
    let (train_pp, _) = apply_preprocessor(&plan, train)?;
    let (test_pp, report) = apply_preprocessor(&plan, test)?;
    Ok(Prepared {
        train: train_pp,
        test: test_pp,
        n_test_excluded: report.dropped_rows_outlier.len(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn inner_score(point: &ModelParams, splits: &[(SurvivalDataset, SurvivalDataset)], seed_of: impl Fn(usize) -> u64) -> Option<f64> {
    let scores: Vec<f64> = splits
        .iter()
        .enumerate()
        .filter_map(|(j, (tr, te))| {
            let model = point.fit(tr, seed_of(j)).ok()?;
            let risk = model.predict(&te.features).ok()?;
            harrell_c(&te.time, &te.event, &risk).ok()
        })
        .collect();
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
}

fn run_model(
    config: &ExperimentConfig,
    prepared: &Prepared,
    inner_splits: &[(SurvivalDataset, SurvivalDataset)],
    fold: usize,
    model_index: usize,
    points: &[ModelParams],
    base: FoldResult,
) -> (FoldResult, usize) {
    let seed = config.cv.seed;
    let point_seed = |g: usize, j: u64| derive_seed(seed, &[MODEL, model_index as u64, g as u64, fold as u64, j]);
    let scores: Vec<Option<f64>> = points
        .par_iter()
        .enumerate()
        .map(|(g, p)| inner_score(p, inner_splits, |j| point_seed(g, j as u64)))
        .collect();
    let mut n_fits = points.len() * inner_splits.len();

    let mut best: Option<(usize, f64)> = None;
    for (g, s) in scores.iter().enumerate() {
        let Some(s) = *s else { continue };
        let better = match best {
            None => true,
            Some((b, bs)) => s > bs || (s == bs && points[g].complexity() < points[b].complexity()),
        };
        if better {
            best = Some((g, s));
        }
    }
    let Some((g, inner_c)) = best else {
        return (invalid_result(&base, "every grid point failed in the inner loop".into()), n_fits);
    };
    let chosen = points[g].clone();
    let mut result = FoldResult { chosen: Some(chosen.clone()), inner_mean_c: Some(inner_c), ..base };

    n_fits += 1;
    let start = Instant::now();
    let fitted = chosen.fit(&prepared.train, point_seed(g, FINAL));
    result.fit_time_seconds = start.elapsed().as_secs_f64();
    let evaluated = fitted.and_then(|model| {
        let train_risk = model.predict(&prepared.train.features)?;
        let test_risk = model.predict(&prepared.test.features)?;
        evaluate_split(
            ScoredSplit { time: &prepared.train.time, event: &prepared.train.event, risk: &train_risk },
            ScoredSplit { time: &prepared.test.time, event: &prepared.test.event, risk: &test_risk },
            &config.metrics.fractions,
            config.metrics.tau,
            config.metrics.tau_quantile,
        )
    });
    match evaluated {
        Ok(m) => result.metrics = Some(m),
        Err(e) => {
            result.valid = false;
            result.invalid_reason = Some(format!("final fit or evaluation failed: {e}"));
        }
    }
    (result, n_fits)
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn assemble_report(
    config: &ExperimentConfig,
    size: usize,
    n_fits: usize,
    folds: Vec<FoldResult>,
    feature_sets: &[FeatureSet],
    grids: &[(String, Vec<ModelParams>)],
) -> BenchmarkReport {
    let mut summary = Vec::new();
    for fs in feature_sets {
        for (model, _) in grids {
            let valid: Vec<&MetricReport> = folds
                .iter()
                .filter(|r| r.valid && &r.model == model && r.feature_set == fs.name)
                .filter_map(|r| r.metrics.as_ref())
                .collect();
            let Some(first) = valid.first() else { continue };
            for (idx, (metric, _)) in first.named_values().into_iter().enumerate() {
                let values: Vec<f64> = valid.iter().map(|m| m.named_values()[idx].1).collect();
                let (mean, sd) = mean_sd(&values);
                let half = 1.96 * sd / (values.len() as f64).sqrt();
                summary.push(SummaryRow {
                    model: model.clone(),
                    feature_set: fs.name.clone(),
                    metric,
                    n_folds: values.len(),
                    mean,
                    sd,
                    ci_low: mean - half,
                    ci_high: mean + half,
                });
            }
        }
    }
    let report = BenchmarkReport {
        size,
        n_fits,
        folds,
        summary,
        ranks: Vec::new(),
        mean_ranks: Vec::new(),
        comparisons: Vec::new(),
        cost_lines: config
            .cost
            .thresholds
            .iter()
            .map(|&t| CostLine { threshold: t, seconds: config.cost.threshold_seconds(t) })
            .collect(),
        positive_class_note: POSITIVE_CLASS_NOTE.to_string(),
    };
    let (ranks, mean_ranks) = rank_models(&report);
    let comparisons = feature_sets
        .iter()
        .filter_map(|fs| compare_models(&report, &fs.name, "harrell_c").ok())
        .collect();
    BenchmarkReport { ranks, mean_ranks, comparisons, ..report }
}

/// Ranks ordered by decreasing value; equal values share the mean of the covered ranks.
pub fn mean_ranks_desc(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut k = 0;
    while k < order.len() {
        let mut end = k;
        while end < order.len() && values[order[end]] == values[order[k]] {
            end += 1;
        }
        let r = (k + 1 + end) as f64 / 2.0;
        for &i in &order[k..end] {
            ranks[i] = r;
        }
        k = end;
    }
    ranks
}

fn metric_value(r: &FoldResult, metric: &str) -> Option<f64> {
    let m = r.metrics.as_ref()?;
    m.named_values().into_iter().find(|(n, _)| n == metric).map(|(_, v)| v)
}

/// Per (feature set, fold) ranking on test Harrell's C, rank 1 best, plus
/// the mean rank of every (model, feature set).
pub fn rank_models(report: &BenchmarkReport) -> (Vec<RankRow>, Vec<MeanRank>) {
    let mut cells: BTreeMap<(String, usize), Vec<(String, f64)>> = BTreeMap::new();
    let mut model_order: Vec<String> = Vec::new();
    for r in report.folds.iter().filter(|r| r.valid) {
        if let Some(c) = metric_value(r, "harrell_c") {
            cells.entry((r.feature_set.clone(), r.outer_fold)).or_default().push((r.model.clone(), c));
            if !model_order.contains(&r.model) {
                model_order.push(r.model.clone());
            }
        }
    }
    let mut rows = Vec::new();
    for ((fs, fold), entries) in &cells {
        if entries.len() < 2 {
            continue;
        }
        let values: Vec<f64> = entries.iter().map(|e| e.1).collect();
        for ((model, c), rank) in entries.iter().zip(mean_ranks_desc(&values)) {
            rows.push(RankRow { feature_set: fs.clone(), outer_fold: *fold, model: model.clone(), harrell_c: *c, rank });
        }
    }
    let mut fs_order: Vec<String> = Vec::new();
    for r in &report.folds {
        if !fs_order.contains(&r.feature_set) {
            fs_order.push(r.feature_set.clone());
        }
    }
    let mut means = Vec::new();
    for fs in &fs_order {
        for model in &model_order {
            let rs: Vec<f64> = rows.iter().filter(|r| &r.feature_set == fs && &r.model == model).map(|r| r.rank).collect();
            if !rs.is_empty() {
                means.push(MeanRank {
                    model: model.clone(),
                    feature_set: fs.clone(),
                    mean_rank: rs.iter().sum::<f64>() / rs.len() as f64,
                });
            }
        }
    }
    (rows, means)
}

/// Paired t-tests of `metric` across the folds where both models are valid,
/// with Benjamini-Hochberg over all distinct pairs.
pub fn compare_models(report: &BenchmarkReport, feature_set: &str, metric: &str) -> Result<ComparisonMatrix> {
    let mut models: Vec<String> = Vec::new();
    for r in report.folds.iter().filter(|r| r.feature_set == feature_set) {
        if !models.contains(&r.model) {
            models.push(r.model.clone());
        }
    }
    let values = |model: &str| -> BTreeMap<usize, f64> {
        report
            .folds
            .iter()
            .filter(|r| r.valid && r.feature_set == feature_set && r.model == model)
            .filter_map(|r| Some((r.outer_fold, metric_value(r, metric)?)))
            .collect()
    };
    let per_model: Vec<BTreeMap<usize, f64>> = models.iter().map(|m| values(m)).collect();
    let m = models.len();
    let mut p = vec![vec![1.0; m]; m];
    let mut pairs = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            let common: Vec<usize> = per_model[a].keys().filter(|k| per_model[b].contains_key(k)).copied().collect();
            if common.len() < 2 {
                return Err(Error::invalid(format!(
                    "{} and {} share fewer than 2 valid folds",
                    models[a], models[b]
                )));
            }
            let xa: Vec<f64> = common.iter().map(|k| per_model[a][k]).collect();
            let xb: Vec<f64> = common.iter().map(|k| per_model[b][k]).collect();
            let (_, pv) = paired_t_test(&xa, &xb)?;
            p[a][b] = pv;
            p[b][a] = pv;
            pairs.push((a, b));
        }
    }
    let adjusted = bh_fdr(&pairs.iter().map(|&(a, b)| p[a][b]).collect::<Vec<_>>());
    let mut q = vec![vec![1.0; m]; m];
    for (&(a, b), qv) in pairs.iter().zip(adjusted) {
        q[a][b] = qv;
        q[b][a] = qv;
    }
    Ok(ComparisonMatrix { feature_set: feature_set.to_string(), metric: metric.to_string(), models, p, q })
}

/// Runs the nested CV on seeded subsamples of each size.
pub fn scaling_experiment(
    config: &ExperimentConfig,
    ds: &SurvivalDataset,
    sizes: &[usize],
    threads: usize,
) -> Result<Vec<BenchmarkReport>> {
    if let Some(&s) = sizes.iter().find(|&&s| s > ds.n_rows()) {
        return Err(Error::invalid(format!("size {s} exceeds the {} available rows", ds.n_rows())));
    }
    sizes
        .iter()
        .map(|&size| {
            let sub = subsample(ds, size, derive_seed(config.cv.seed, &[size as u64]))?;
            run_nested_cv_on(config, &sub, threads)
        })
        .collect()
}

/// Long-format `model,feature_set,size,fold,metric,value` rows of valid folds.
pub fn results_csv(report: &BenchmarkReport) -> String {
    let mut out = String::from("model,feature_set,size,fold,metric,value\n");
    for r in report.folds.iter().filter(|r| r.valid) {
        if let Some(m) = &r.metrics {
            for (name, v) in m.named_values() {
                out.push_str(&format!("{},{},{},{},{},{}\n", r.model, r.feature_set, r.size, r.outer_fold, name, v));
            }
        }
    }
    out
}

pub fn timing_csv(reports: &[BenchmarkReport]) -> String {
    let mut out = String::from("model,feature_set,size,fold,seconds,preprocess_seconds\n");
    for report in reports {
        for r in &report.folds {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.model, r.feature_set, r.size, r.outer_fold, r.fit_time_seconds, r.preprocess_seconds
            ));
        }
    }
    out
}

pub fn summary_json(report: &BenchmarkReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

/// Writes `results.csv`, `summary.json` and, when enabled, `timing.csv`.
pub fn write_report(report: &BenchmarkReport, dir: &Path, record_timing: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), results_csv(report))?;
    fs::write(dir.join("summary.json"), summary_json(report)?)?;
    if record_timing {
        fs::write(dir.join("timing.csv"), timing_csv(std::slice::from_ref(report)))?;
    }
    Ok(())
}

/// One subdirectory `n<size>` per report plus a combined `timing.csv` and
/// the cost-threshold lines in `cost_thresholds.csv`.
pub fn write_scaling(reports: &[BenchmarkReport], config: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in reports {
        write_report(r, &dir.join(format!("n{}", r.size)), false)?;
    }
    if config.record_timing {
        fs::write(dir.join("timing.csv"), timing_csv(reports))?;
    }
    let mut lines = String::from("threshold,seconds\n");
    for &t in &config.cost.thresholds {
        lines.push_str(&format!("{},{}\n", t, config.cost.threshold_seconds(t)));
    }
    fs::write(dir.join("cost_thresholds.csv"), lines)?;
    Ok(())
}

pub fn read_summary(dir: &Path) -> Result<BenchmarkReport> {
    let text = fs::read_to_string(dir.join("summary.json"))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::RiskKind;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic(SynthSpec {
                n_rows: 120,
                n_continuous: 2,
                n_boolean: 1,
                risk: RiskKind::Linear { beta: vec![1.0, -0.5, 0.5] },
                baseline_rate: 0.1,
                target_event_fraction: 0.6,
                seed: 3,
            }),
            feature_sets: vec![],
            biochemical_columns: vec![],
            models: vec![GridSpec::new(ModelKind::CoxPlain), GridSpec {
                alphas: Some(vec![0.1, 1.0]),
                ..GridSpec::new(ModelKind::CoxRidge)
            }],
            cv: CvSettings { outer_k: 3, inner_k: 2, seed: 1 },
            metrics: MetricSettings::default(),
            cost: CostModel::default(),
            record_timing: true,
            output_dir: None,
        }
    }

    #[test]
    fn default_grid_sizes() {
        let sizes: Vec<usize> = ModelKind::ALL.iter().map(|k| GridSpec::new(*k).points().unwrap().len()).collect();
        assert_eq!(sizes, vec![1, 5, 5, 50, 9, 9, 9, 9]);
        assert_eq!(GridSpec::new(ModelKind::CoxPlain).points().unwrap(), vec![ModelParams::CoxPlain]);
    }

    #[test]
    fn complexity_table() {
        let p = |k| GridSpec::new(k).points().unwrap();
        assert_eq!(complexity(&p(ModelKind::GbtLeafWise)[0]), 350.0);
        assert_eq!(complexity(&p(ModelKind::GbtLeafWise)[8]), 204_600.0);
        assert_eq!(complexity(&p(ModelKind::Mlp)[8]), 327_680.0);
        assert_eq!(complexity(&p(ModelKind::Rsf)[4]), 12_700.0);
        assert_eq!(complexity(&ModelParams::CoxRidge { alpha: 1.0 }), 0.0);
    }

    #[test]
    fn mean_rank_ties() {
        assert_eq!(mean_ranks_desc(&[0.72, 0.56]), vec![1.0, 2.0]);
        assert_eq!(mean_ranks_desc(&[0.6, 0.6]), vec![1.5, 1.5]);
        assert_eq!(mean_ranks_desc(&[0.5, 0.9, 0.5]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn cost_threshold_arithmetic() {
        let c = CostModel { price_per_hour: 1.0, thresholds: vec![0.1] };
        assert!((c.threshold_seconds(0.1) - 360.0).abs() < 1e-9);
    }

    #[test]
    fn fit_count_and_thread_invariance() {
        let cfg = tiny_config();
        let a = run_nested_cv(&cfg, 1).unwrap();
        assert_eq!(a.n_fits, (3 * 2 + 3) + (3 * 2 * 2 + 3));
        assert_eq!(a.folds.len(), 6);
        assert!(a.folds.iter().all(|r| r.valid));
        let b = run_nested_cv(&cfg, 3).unwrap();
        assert_eq!(summary_json(&a).unwrap(), summary_json(&b).unwrap());
        assert_eq!(results_csv(&a), results_csv(&b));
        assert_eq!(a.ranks.len(), 2 * 3);
        let cmp = &a.comparisons[0];
        assert_eq!(cmp.p[0][0], 1.0);
        assert_eq!(cmp.p[0][1], cmp.p[1][0]);
    }

    #[test]
    fn self_comparison_is_one() {
        let mut cfg = tiny_config();
        cfg.models = vec![
            GridSpec { name: Some("a".into()), ..GridSpec::new(ModelKind::CoxPlain) },
            GridSpec { name: Some("b".into()), ..GridSpec::new(ModelKind::CoxPlain) },
        ];
        let r = run_nested_cv(&cfg, 1).unwrap();
        let cmp = compare_models(&r, "all", "harrell_c").unwrap();
        assert_eq!(cmp.p[0][1], 1.0);
        assert_eq!(cmp.q[0][1], 1.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.cv.outer_k = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.models.push(GridSpec::new(ModelKind::CoxPlain));
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.models[1].alphas = Some(vec![]);
        assert!(cfg.validate().is_err());
        let json = serde_json::to_string(&tiny_config()).unwrap();
        assert_eq!(ExperimentConfig::from_json(&json).unwrap(), tiny_config());
        assert!(ExperimentConfig::from_json(r#"{"dataset":{"csv":{"path":"x"}},"models":[],"bogus":1}"#).is_err());
    }

    #[test]
    fn scaling_rejects_oversize() {
        let cfg = tiny_config();
        let ds = cfg.load_dataset().unwrap();
        assert!(scaling_experiment(&cfg, &ds, &[121], 1).is_err());
    }

    #[test]
    fn fitted_model_json_round_trip() {
        let cfg = tiny_config();
        let ds = cfg.load_dataset().unwrap();
        for p in [ModelParams::CoxPlain, ModelParams::Gbt(GbtHyperparams::new(3, GrowthPolicy::LeafWise { num_leaves: 3 }))] {
            let m = p.fit(&ds, 0).unwrap();
            let back = FittedModel::from_json(&m.to_json().unwrap()).unwrap();
            assert_eq!(back.predict(&ds.features).unwrap(), m.predict(&ds.features).unwrap());
        }
    }
}
