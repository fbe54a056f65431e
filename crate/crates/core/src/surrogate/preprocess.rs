//! Input and label scaling.
//!
//! Inputs go through an optional Box-Cox transform per dimension,
//! `BCT(x) = (x^λ − 1)/λ`, and are then standardized. Labels are only
//! standardized. Standard deviations are floored at [`STD_FLOOR`].

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-12;
pub const DEFAULT_BCT_LAMBDA: f64 = 0.1;

pub fn box_cox(x: f64, lambda: f64) -> f64 {
    (x.powf(lambda) - 1.0) / lambda
}

pub fn inverse_box_cox(y: f64, lambda: f64) -> f64 {
    (lambda * y + 1.0).powf(1.0 / lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub bct_mask: Vec<bool>,
    pub bct_lambda: f64,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub label_mean: Vec<f64>,
    pub label_std: Vec<f64>,
}

fn mean_std(n: usize, width: usize, get: impl Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; width];
    for i in 0..n {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += get(i, j);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; width];
    for i in 0..n {
        for (j, v) in var.iter_mut().enumerate() {
            let d = get(i, j) - mean[j];
            *v += d * d;
        }
    }
    let std = var.iter().map(|v| (v / n as f64).sqrt().max(STD_FLOOR)).collect();
    (mean, std)
}

impl Preprocessor {
    /// Identity scaling for `in_dim` inputs and `out_dim` labels.
    pub fn identity(in_dim: usize, out_dim: usize) -> Self {
        Self {
            bct_mask: vec![false; in_dim],
            bct_lambda: DEFAULT_BCT_LAMBDA,
            input_mean: vec![0.0; in_dim],
            input_std: vec![1.0; in_dim],
            label_mean: vec![0.0; out_dim],
            label_std: vec![1.0; out_dim],
        }
    }

    /// Fits the statistics on `ds`. `bct_mask` defaults to all-false.
    pub fn fit(ds: &Dataset, bct_mask: Option<&[bool]>) -> Result<Self> {
        Self::fit_with_lambda(ds, bct_mask, DEFAULT_BCT_LAMBDA)
    }

    pub fn fit_with_lambda(ds: &Dataset, bct_mask: Option<&[bool]>, bct_lambda: f64) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Config("cannot fit preprocessing on an empty dataset".into()));
        }
        let in_dim = ds.in_dim();
        let mask = match bct_mask {
            Some(m) if m.len() != in_dim => {
                return Err(Error::Dimension {
                    expected: in_dim,
                    got: m.len(),
                })
            }
            Some(m) => m.to_vec(),
            None => vec![false; in_dim],
        };
        if !(bct_lambda > 0.0) {
            return Err(Error::Config("Box-Cox lambda must be positive".into()));
        }
        let mut transformed = Vec::with_capacity(ds.len() * in_dim);
        for i in 0..ds.len() {
            for (j, &x) in ds.input(i).iter().enumerate() {
                transformed.push(if mask[j] { checked_bct(x, bct_lambda, j)? } else { x });
            }
        }
        let (input_mean, input_std) = mean_std(ds.len(), in_dim, |i, j| transformed[i * in_dim + j]);
        let (label_mean, label_std) = mean_std(ds.len(), ds.dim(), |i, j| ds.label(i)[j]);
        Ok(Self {
            bct_mask: mask,
            bct_lambda,
            input_mean,
            input_std,
            label_mean,
            label_std,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.input_mean.len()
    }

    pub fn out_dim(&self) -> usize {
        self.label_mean.len()
    }

    /// Raw input to network input.
    pub fn transform_input_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if x.len() != self.in_dim() {
            return Err(Error::Dimension {
                expected: self.in_dim(),
                got: x.len(),
            });
        }
        for j in 0..x.len() {
            let v = if self.bct_mask[j] {
                checked_bct(x[j], self.bct_lambda, j)?
            } else {
                x[j]
            };
            out[j] = (v - self.input_mean[j]) / self.input_std[j];
        }
        Ok(())
    }

    pub fn transform_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; x.len()];
        self.transform_input_into(x, &mut out)?;
        Ok(out)
    }

    /// Network input back to raw units.
    pub fn inverse_input(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(j, &v)| {
                let y = v * self.input_std[j] + self.input_mean[j];
                if self.bct_mask[j] {
                    inverse_box_cox(y, self.bct_lambda)
                } else {
                    y
                }
            })
            .collect()
    }

    pub fn transform_label(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(j, &v)| (v - self.label_mean[j]) / self.label_std[j])
            .collect()
    }

    pub fn inverse_label_into(&self, z: &[f64], out: &mut [f64]) {
        for j in 0..z.len() {
            out[j] = z[j] * self.label_std[j] + self.label_mean[j];
        }
    }

    pub fn inverse_label(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; z.len()];
        self.inverse_label_into(z, &mut out);
        out
    }
}

fn checked_bct(x: f64, lambda: f64, dim: usize) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::Preprocess {
            dim,
            msg: format!("Box-Cox needs nonnegative values, got {x}"),
        });
    }
    Ok(box_cox(x, lambda))
}
