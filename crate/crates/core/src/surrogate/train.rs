//! Adam training on the mean absolute error of standardized labels.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use super::preprocess::Preprocessor;
use super::MlpModel;
use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Box-Cox mask over input columns; none by default.
    pub bct_mask: Option<Vec<bool>>,
    pub bct_lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 100,
            val_fraction: 0.05,
            seed: 0,
            shuffle: true,
            bct_mask: None,
            bct_lambda: super::preprocess::DEFAULT_BCT_LAMBDA,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Per-epoch losses. Standardized MAE averages over label components.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    /// Mean of the batch losses of each epoch.
    pub train_mae: Vec<f64>,
    /// Validation MAE, standardized; empty without a validation split.
    pub val_mae: Vec<f64>,
    /// Validation MAE in label units.
    pub val_mae_raw: Vec<f64>,
}

fn gather(src: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let w = src.ncols();
    let mut out = Array2::zeros((idx.len(), w));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&src.row(i));
    }
    out
}

/// Trains a network with `layer_sizes = [in_dim, hidden…, dim]` on `ds`.
pub fn train(ds: &Dataset, layer_sizes: &[usize], cfg: &TrainConfig) -> Result<(MlpModel, History)> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    if layer_sizes.first() != Some(&ds.in_dim()) || layer_sizes.last() != Some(&ds.dim()) {
        return Err(Error::Config(format!(
            "layer sizes {layer_sizes:?} do not match dataset input {} and output {}",
            ds.in_dim(),
            ds.dim()
        )));
    }
    let pre = Preprocessor::fit_with_lambda(ds, cfg.bct_mask.as_deref(), cfg.bct_lambda)?;
    let (n, in_dim, out_dim) = (ds.len(), ds.in_dim(), ds.dim());
    let mut x = Array2::zeros((n, in_dim));
    let mut y = Array2::zeros((n, out_dim));
    for i in 0..n {
        let xi = pre.transform_input(ds.input(i))?;
        x.row_mut(i).assign(&ndarray::ArrayView1::from(&xi));
        let yi = pre.transform_label(ds.label(i));
        y.row_mut(i).assign(&ndarray::ArrayView1::from(&yi));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((cfg.val_fraction * n as f64).floor() as usize).min(n - 1);
    let val_idx: Vec<usize> = order[n - n_val..].to_vec();
    let mut train_idx: Vec<usize> = order[..n - n_val].to_vec();
    train_idx.sort_unstable();
    let (xv, yv) = (gather(&x, &val_idx), gather(&y, &val_idx));

    let mut mlp = Mlp::kaiming_uniform(layer_sizes, cfg.seed)?;
    let mut adam = Adam::new(mlp.params().len(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut hist = History::default();
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            train_idx.shuffle(&mut rng);
        }
        let mut sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in train_idx.chunks(cfg.batch_size).enumerate() {
            let (xb, yb) = (gather(&x, chunk), gather(&y, chunk));
            let (loss, grad) = mlp.loss_and_gradient(xb.view(), yb.view());
            let max_grad = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            if !loss.is_finite() || !max_grad.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: b,
                    max_grad,
                });
            }
            adam.step(mlp.params_mut(), &grad);
            sum += loss;
            batches += 1;
        }
        hist.train_mae.push(sum / batches as f64);
        if n_val > 0 {
            let pred = mlp.forward_batch(xv.view());
            let count = (n_val * out_dim) as f64;
            let diff = &pred - &yv;
            let std_mae = diff.iter().map(|d| d.abs()).sum::<f64>() / count;
            let raw_mae = diff
                .indexed_iter()
                .map(|((_, j), d)| d.abs() * pre.label_std[j])
                .sum::<f64>()
                / count;
            hist.val_mae.push(std_mae);
            hist.val_mae_raw.push(raw_mae);
        }
    }
    let model = MlpModel::new(mlp, pre, ds.dt(), ds.is_autonomous(), cfg.seed)?;
    Ok((model, hist))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_on_abs() {
        let mut p = [1.0];
        let mut adam = Adam::new(1, 0.1, 0.9, 0.999, 1e-8);
        adam.step(&mut p, &[1.0]);
        assert!((p[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12);
    }
}
