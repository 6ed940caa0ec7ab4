//! Feed-forward Cox network.
//!
//! Each hidden block is dense -> batch norm -> ReLU -> dropout; a bias-free
//! linear layer maps the last block to the scalar risk score. Training
//! minimises the within-batch negative mean partial log-likelihood with Adam
//! and reduces the learning rate on plateaus of the full training loss.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cox_objective::{build_risk_index, grad_hess, RiskSetIndex};
use crate::dataset::{FeatureMatrix, SurvivalDataset};
use crate::error::{Error, Result};
use crate::rng::seeded;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpHyperparams {
    pub num_layers: usize,
    pub layer_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_patience")]
    pub lr_patience: usize,
    #[serde(default = "d_epochs")]
    pub max_epochs: usize,
    /// Training stops when a plateau occurs after this many reductions.
    #[serde(default = "d_reductions")]
    pub max_lr_reductions: usize,
    #[serde(default)]
    pub seed: u64,
}

fn d_lr() -> f64 {
    0.001
}
fn d_dropout() -> f64 {
    0.2
}
fn d_batch() -> usize {
    50_000
}
fn d_patience() -> usize {
    5
}
fn d_epochs() -> usize {
    200
}
fn d_reductions() -> usize {
    2
}

impl MlpHyperparams {
    pub fn new(num_layers: usize, layer_size: usize) -> Self {
        MlpHyperparams {
            num_layers,
            layer_size,
            learning_rate: d_lr(),
            dropout: d_dropout(),
            batch_size: d_batch(),
            lr_patience: d_patience(),
            max_epochs: d_epochs(),
            max_lr_reductions: d_reductions(),
            seed: 0,
        }
    }

    /// `num_layers x layer_size^2`.
    pub fn complexity(&self) -> f64 {
        (self.num_layers * self.layer_size * self.layer_size) as f64
    }

    fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.layer_size == 0 {
            return Err(Error::invalid("num_layers and layer_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseBlock {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub bn_scale: Vec<f64>,
    pub bn_shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub feature_names: Vec<String>,
    pub blocks: Vec<DenseBlock>,
    pub output: Vec<f64>,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize, len: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| rng.random_range(-a..=a)).collect()
}

pub fn init_mlp(feature_names: Vec<String>, hp: &MlpHyperparams) -> Result<MlpModel> {
    hp.validate()?;
    let p = feature_names.len();
    if p == 0 {
        return Err(Error::invalid("network needs at least one input feature"));
    }
    let mut rng = seeded(hp.seed);
    let mut blocks = Vec::with_capacity(hp.num_layers);
    let mut in_dim = p;
    for _ in 0..hp.num_layers {
        let out_dim = hp.layer_size;
        blocks.push(DenseBlock {
            in_dim,
            out_dim,
            weight: glorot(&mut rng, in_dim, out_dim, in_dim * out_dim),
            bias: vec![0.0; out_dim],
            bn_scale: vec![1.0; out_dim],
            bn_shift: vec![0.0; out_dim],
            running_mean: vec![0.0; out_dim],
            running_var: vec![1.0; out_dim],
        });
        in_dim = out_dim;
    }
    let output = glorot(&mut rng, in_dim, 1, in_dim);
    Ok(MlpModel { feature_names, blocks, output, dropout: hp.dropout })
}

impl MlpModel {
    /// Sets every weight and bias to zero (batch-norm state untouched).
    pub fn zero_weights(&mut self) {
        for b in &mut self.blocks {
            b.weight.iter_mut().for_each(|w| *w = 0.0);
            b.bias.iter_mut().for_each(|w| *w = 0.0);
        }
        self.output.iter_mut().for_each(|w| *w = 0.0);
    }

    /// Trainable parameter slices in a fixed order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for b in &self.blocks {
            out.extend([b.weight.as_slice(), &b.bias, &b.bn_scale, &b.bn_shift]);
        }
        out.push(&self.output);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            out.push(&mut b.bn_scale);
            out.push(&mut b.bn_shift);
        }
        out.push(&mut self.output);
        out
    }
}

/// Cached activations of one block for the backward pass.
struct BlockCache {
    input: Vec<f64>,
    normed: Vec<f64>,
    pre_relu: Vec<f64>,
    inv_std: Vec<f64>,
    mask: Option<Vec<f64>>,
}

struct Forward {
    eta: Vec<f64>,
    caches: Vec<BlockCache>,
    last: Vec<f64>,
}

fn forward(
    model: &mut MlpModel,
    x: &[f64],
    rows: usize,
    mode: Mode,
    dropout_rng: Option<&mut dyn rand::RngCore>,
    update_running: bool,
) -> Forward {
    let mut act = x.to_vec();
    let mut caches = Vec::with_capacity(model.blocks.len());
    let keep = 1.0 - model.dropout;
    let mut rng = dropout_rng;
    for block in &mut model.blocks {
        let (din, dout) = (block.in_dim, block.out_dim);
        let mut z = vec![0.0; rows * dout];
        for r in 0..rows {
            let xr = &act[r * din..(r + 1) * din];
            for o in 0..dout {
                let w = &block.weight[o * din..(o + 1) * din];
                z[r * dout + o] = block.bias[o] + xr.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let (mean, var) = match mode {
            Mode::Eval => (block.running_mean.clone(), block.running_var.clone()),
            Mode::Train => {
                let mut mean = vec![0.0; dout];
                let mut var = vec![0.0; dout];
                for r in 0..rows {
                    for o in 0..dout {
                        mean[o] += z[r * dout + o];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                for r in 0..rows {
                    for o in 0..dout {
                        let d = z[r * dout + o] - mean[o];
                        var[o] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                if update_running {
                    let unbiased = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
                    for o in 0..dout {
                        block.running_mean[o] = BN_MOMENTUM * block.running_mean[o] + (1.0 - BN_MOMENTUM) * mean[o];
                        block.running_var[o] =
                            BN_MOMENTUM * block.running_var[o] + (1.0 - BN_MOMENTUM) * var[o] * unbiased;
                    }
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut normed = vec![0.0; rows * dout];
        let mut pre = vec![0.0; rows * dout];
        let mut out = vec![0.0; rows * dout];
        for r in 0..rows {
            for o in 0..dout {
                let k = r * dout + o;
                normed[k] = (z[k] - mean[o]) * inv_std[o];
                pre[k] = block.bn_scale[o] * normed[k] + block.bn_shift[o];
                out[k] = pre[k].max(0.0);
            }
        }
        let mask = match (mode, rng.as_deref_mut()) {
            (Mode::Train, Some(r)) if model.dropout > 0.0 => {
                let m: Vec<f64> = (0..rows * dout)
                    .map(|_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                for (o, mv) in out.iter_mut().zip(&m) {
                    *o *= mv;
                }
                Some(m)
            }
            _ => None,
        };
        caches.push(BlockCache { input: act, normed, pre_relu: pre, inv_std, mask });
        act = out;
    }
    let width = model.output.len();
    let eta = (0..rows)
        .map(|r| act[r * width..(r + 1) * width].iter().zip(&model.output).map(|(a, w)| a * w).sum())
        .collect();
    Forward { eta, caches, last: act }
}

/// Back-propagates `d_eta` and returns gradients in [`MlpModel::params`] order.
fn backward(model: &MlpModel, fwd: &Forward, d_eta: &[f64], rows: usize, mode: Mode) -> Vec<Vec<f64>> {
    let width = model.output.len();
    let mut d_out = vec![0.0; width];
    let mut d_act = vec![0.0; rows * width];
    for r in 0..rows {
        for o in 0..width {
            d_out[o] += d_eta[r] * fwd.last[r * width + o];
            d_act[r * width + o] = d_eta[r] * model.output[o];
        }
    }
    let mut grads: Vec<Vec<f64>> = Vec::new();
    for (block, cache) in model.blocks.iter().zip(&fwd.caches).rev() {
        let (din, dout) = (block.in_dim, block.out_dim);
        if let Some(mask) = &cache.mask {
            for (d, m) in d_act.iter_mut().zip(mask) {
                *d *= m;
            }
        }
        let mut d_pre = d_act;
        for (d, p) in d_pre.iter_mut().zip(&cache.pre_relu) {
            if *p <= 0.0 {
                *d = 0.0;
            }
        }
        let mut d_scale = vec![0.0; dout];
        let mut d_shift = vec![0.0; dout];
        let mut d_norm = vec![0.0; rows * dout];
        for r in 0..rows {
            for o in 0..dout {
                let k = r * dout + o;
                d_scale[o] += d_pre[k] * cache.normed[k];
                d_shift[o] += d_pre[k];
                d_norm[k] = d_pre[k] * block.bn_scale[o];
            }
        }
        let mut dz = vec![0.0; rows * dout];
        match mode {
            Mode::Eval => {
                for r in 0..rows {
                    for o in 0..dout {
                        dz[r * dout + o] = d_norm[r * dout + o] * cache.inv_std[o];
                    }
                }
            }
            Mode::Train => {
                let m = rows as f64;
                for o in 0..dout {
                    let mut s = 0.0;
                    let mut sx = 0.0;
                    for r in 0..rows {
                        s += d_norm[r * dout + o];
                        sx += d_norm[r * dout + o] * cache.normed[r * dout + o];
                    }
                    for r in 0..rows {
                        let k = r * dout + o;
                        dz[k] = cache.inv_std[o] / m * (m * d_norm[k] - s - cache.normed[k] * sx);
                    }
                }
            }
        }
        let mut d_w = vec![0.0; dout * din];
        let mut d_b = vec![0.0; dout];
        let mut d_in = vec![0.0; rows * din];
        for r in 0..rows {
            let xr = &cache.input[r * din..(r + 1) * din];
            for o in 0..dout {
                let g = dz[r * dout + o];
                if g == 0.0 {
                    continue;
                }
                d_b[o] += g;
                let w = &block.weight[o * din..(o + 1) * din];
                for i in 0..din {
                    d_w[o * din + i] += g * xr[i];
                    d_in[r * din + i] += g * w[i];
                }
            }
        }
        grads.push(d_shift);
        grads.push(d_scale);
        grads.push(d_b);
        grads.push(d_w);
        d_act = d_in;
    }
    grads.reverse();
    grads.push(d_out);
    grads
}

fn row_major(x: &FeatureMatrix, names: &[String], rows: Option<&[usize]>) -> Result<Vec<f64>> {
    let cols = x.aligned_columns(names)?;
    let pick: Vec<usize> = rows.map_or_else(|| (0..x.n_rows).collect(), <[usize]>::to_vec);
    let mut out = Vec::with_capacity(pick.len() * cols.len());
    for &r in &pick {
        out.extend(cols.iter().map(|c| c[r]));
    }
    Ok(out)
}

/// Negative mean partial log-likelihood of the whole input and its gradient
/// with respect to every parameter. Dropout is disabled; batch norm follows
/// `mode` and running statistics are left untouched.
pub fn loss_and_grad(
    model: &MlpModel,
    x: &FeatureMatrix,
    time: &[f64],
    event: &[bool],
    mode: Mode,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let idx = build_risk_index(time, event)?;
    let xm = row_major(x, &model.feature_names, None)?;
    let mut m = model.clone();
    m.dropout = 0.0;
    batch_loss_and_grad(&mut m, &xm, &idx, mode, None, false)
}

fn batch_loss_and_grad(
    model: &mut MlpModel,
    x: &[f64],
    idx: &RiskSetIndex,
    mode: Mode,
    rng: Option<&mut dyn rand::RngCore>,
    update_running: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let rows = idx.n_rows();
    let fwd = forward(model, x, rows, mode, rng, update_running);
    let out = grad_hess(idx, &fwd.eta)?;
    let d_eta: Vec<f64> = out.grad.iter().map(|g| -g / rows as f64).collect();
    let grads = backward(model, &fwd, &d_eta, rows, mode);
    Ok((out.loss, grads))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(shapes: &[usize]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for i in 0..p.len() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g[i];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpFit {
    pub model: MlpModel,
    /// Full-training loss in evaluation mode, before training and after each epoch.
    pub loss_history: Vec<f64>,
    pub epochs: usize,
    pub lr_reductions: usize,
    pub skipped_batches: usize,
}

/// Splits rows into batches, spreading event rows evenly so that every batch
/// with at least one row per event-carrying slot holds an event.
fn stratified_batches(event: &[bool], batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let n = event.len();
    let n_batches = n.div_ceil(batch_size).max(1);
    let mut pos: Vec<usize> = (0..n).filter(|&i| event[i]).collect();
    let mut neg: Vec<usize> = (0..n).filter(|&i| !event[i]).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let mut batches = vec![Vec::new(); n_batches];
    for (k, r) in pos.into_iter().chain(neg).enumerate() {
        batches[k % n_batches].push(r);
    }
    batches
}

pub fn fit_mlp(ds: &SurvivalDataset, hp: &MlpHyperparams) -> Result<MlpModel> {
    fit_mlp_traced(ds, hp, None).map(|f| f.model)
}

/// Trains from `start` (or a fresh seeded initialisation).
pub fn fit_mlp_traced(ds: &SurvivalDataset, hp: &MlpHyperparams, start: Option<MlpModel>) -> Result<MlpFit> {
    hp.validate()?;
    if ds.features.has_missing() {
        return Err(Error::validation("features contain missing values; preprocess first"));
    }
    let full_idx = build_risk_index(&ds.time, &ds.event)?;
    let mut model = match start {
        Some(m) => m,
        None => init_mlp(ds.features.names.clone(), hp)?,
    };
    model.dropout = hp.dropout;
    let names = model.feature_names.clone();
    let x_all = row_major(&ds.features, &names, None)?;
    let p = names.len();

    let full_loss = |m: &mut MlpModel| -> Result<f64> {
        let fwd = forward(m, &x_all, ds.n_rows(), Mode::Eval, None, false);
        Ok(grad_hess(&full_idx, &fwd.eta)?.loss)
    };

    let mut rng = seeded(hp.seed ^ 0xD1CE);
    let shapes: Vec<usize> = model.params().iter().map(|s| s.len()).collect();
    let mut adam = Adam::new(&shapes);
    let mut lr = hp.learning_rate;
    let mut best = full_loss(&mut model)?;
    let mut history = vec![best];
    let mut stale = 0;
    let mut reductions = 0;
    let mut skipped = 0;
    let mut epochs = 0;
    let batch_size = hp.batch_size.min(ds.n_rows());

    for _ in 0..hp.max_epochs {
        epochs += 1;
        for batch in stratified_batches(&ds.event, batch_size, &mut rng) {
            let time: Vec<f64> = batch.iter().map(|&i| ds.time[i]).collect();
            let event: Vec<bool> = batch.iter().map(|&i| ds.event[i]).collect();
            if !event.iter().any(|e| *e) {
                skipped += 1;
                continue;
            }
            let idx = build_risk_index(&time, &event)?;
            let mut xb = Vec::with_capacity(batch.len() * p);
            for &r in &batch {
                xb.extend_from_slice(&x_all[r * p..(r + 1) * p]);
            }
            let (_, grads) = batch_loss_and_grad(&mut model, &xb, &idx, Mode::Train, Some(&mut rng), true)?;
            adam.update(&mut model.params_mut(), &grads, lr);
        }
        let loss = full_loss(&mut model)?;
        if !loss.is_finite() {
            return Err(Error::Numerical("network training diverged".into()));
        }
        history.push(loss);
        if loss < best {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= hp.lr_patience.max(1) {
                if reductions >= hp.max_lr_reductions {
                    break;
                }
                lr *= 0.1;
                reductions += 1;
                stale = 0;
            }
        }
    }
    Ok(MlpFit { model, loss_history: history, epochs, lr_reductions: reductions, skipped_batches: skipped })
}

/// Evaluation-mode risk scores.
pub fn predict(model: &MlpModel, x: &FeatureMatrix) -> Result<Vec<f64>> {
    let xm = row_major(x, &model.feature_names, None)?;
    let mut m = model.clone();
    Ok(forward(&mut m, &xm, x.n_rows, Mode::Eval, None, false).eta)
}
