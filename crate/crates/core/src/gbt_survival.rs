//! Gradient-boosted trees on the Cox objective.
//!
//! The risk-set index is built once per fit; every boosting round then costs
//! one linear sweep for gradients plus one tree.

use serde::{Deserialize, Serialize};

use crate::cox_objective::{build_risk_index, grad_hess, partial_log_likelihood};
use crate::dataset::{FeatureMatrix, SurvivalDataset};
use crate::error::{Error, Result};
pub use crate::tree::{GrowthPolicy, Node, Tree};
use crate::tree::{grow_presorted, Presorted, SplitParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtHyperparams {
    pub n_estimators: usize,
    pub policy: GrowthPolicy,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_min_leaf")]
    pub min_leaf: usize,
    #[serde(default = "default_lambda")]
    pub lambda_l2: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_learning_rate() -> f64 {
    0.1
}
fn default_min_leaf() -> usize {
    10
}
fn default_lambda() -> f64 {
    1.0
}

impl GbtHyperparams {
    pub fn new(n_estimators: usize, policy: GrowthPolicy) -> Self {
        GbtHyperparams {
            n_estimators,
            policy,
            learning_rate: default_learning_rate(),
            min_leaf: default_min_leaf(),
            lambda_l2: default_lambda(),
            seed: 0,
        }
    }

    /// `n_estimators x leaf budget`.
    pub fn complexity(&self) -> f64 {
        (self.n_estimators * self.policy.leaf_budget()) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub feature_names: Vec<String>,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
}

/// A fitted model plus the training loss `-l/n` before the first round and
/// after every round.
#[derive(Debug, Clone)]
pub struct GbtFit {
    pub model: GbtModel,
    pub train_loss: Vec<f64>,
    /// Risk scores tracked incrementally during training.
    pub train_eta: Vec<f64>,
}

pub fn fit_gbt(ds: &SurvivalDataset, hp: &GbtHyperparams) -> Result<GbtModel> {
    fit_gbt_traced(ds, hp).map(|f| f.model)
}

pub fn fit_gbt_traced(ds: &SurvivalDataset, hp: &GbtHyperparams) -> Result<GbtFit> {
    if hp.n_estimators == 0 {
        return Err(Error::invalid("n_estimators must be >= 1"));
    }
    match hp.policy {
        GrowthPolicy::LeafWise { num_leaves } if num_leaves < 2 => {
            return Err(Error::invalid("num_leaves must be >= 2"))
        }
        GrowthPolicy::DepthWise { max_depth } if max_depth < 1 => {
            return Err(Error::invalid("max_depth must be >= 1"))
        }
        _ => {}
    }
    if hp.min_leaf > ds.n_rows() {
        return Err(Error::invalid(format!(
            "min_leaf {} exceeds {} rows",
            hp.min_leaf,
            ds.n_rows()
        )));
    }
    if ds.features.has_missing() {
        return Err(Error::validation("features contain missing values; preprocess first"));
    }
    let idx = build_risk_index(&ds.time, &ds.event)?;
    let cols: Vec<&[f64]> = ds.features.columns.iter().map(Vec::as_slice).collect();
    let presorted = Presorted::new(&cols);
    let params = SplitParams { min_leaf: hp.min_leaf.max(1), lambda: hp.lambda_l2 };
    let n = ds.n_rows();

    let mut eta = vec![0.0; n];
    let mut trees = Vec::with_capacity(hp.n_estimators);
    let mut train_loss = Vec::with_capacity(hp.n_estimators + 1);
    for _ in 0..hp.n_estimators {
        let out = grad_hess(&idx, &eta)?;
        train_loss.push(out.loss);
        let g: Vec<f64> = out.grad.iter().map(|v| -v).collect();
        let tree = grow_presorted(&presorted, &cols, &g, &out.hess, None, hp.policy, params);
        for (i, e) in eta.iter_mut().enumerate() {
            *e += hp.learning_rate * tree.predict_columns(&cols, i);
        }
        trees.push(tree);
    }
    train_loss.push(-partial_log_likelihood(&idx, &eta)? / n as f64);
    Ok(GbtFit {
        model: GbtModel {
            feature_names: ds.features.names.clone(),
            learning_rate: hp.learning_rate,
            trees,
        },
        train_loss,
        train_eta: eta,
    })
}

pub fn predict(model: &GbtModel, x: &FeatureMatrix) -> Result<Vec<f64>> {
    let cols = x.aligned_columns(&model.feature_names)?;
    Ok((0..x.n_rows)
        .map(|i| {
            model
                .trees
                .iter()
                .map(|t| model.learning_rate * t.predict_columns(&cols, i))
                .sum()
        })
        .collect())
}
