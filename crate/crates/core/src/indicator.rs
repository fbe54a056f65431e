//! Solver-confidence indicator and hybrid stepping.
//!
//! The indicator fits a diagonal Gaussian to the preprocessed training
//! inputs and scores a query `y` by
//! `p(y) = ∏ᵢ exp(−½ zᵢ²)`, `zᵢ = (yᵢ − μᵢ)/σᵢ`.
//! The usual `√(2π)·ϕ` normalization cancels, so `p(μ) = 1`.
//!
//! [`hybrid_rollout`] takes a surrogate step when `p ≥ threshold` and falls
//! back to the numerical integrator otherwise.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::dynamics::OdeSystem;
use crate::error::{Error, Result};
use crate::integrate::{advance, IntegratorConfig, Trajectory};
use crate::surrogate::preprocess::{Preprocessor, STD_FLOOR};
use crate::surrogate::{ForwardBuffers, MlpModel};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorModel {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub threshold: f64,
}

impl IndicatorModel {
    /// Per-dimension mean and standard deviation of the preprocessed inputs.
    pub fn fit(ds: &Dataset, pre: &Preprocessor) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Config("cannot fit an indicator on an empty dataset".into()));
        }
        let d = ds.in_dim();
        let n = ds.len() as f64;
        let mut z = vec![0.0; d];
        let mut sum = vec![0.0; d];
        let mut rows = Vec::with_capacity(ds.len() * d);
        for i in 0..ds.len() {
            pre.transform_input_into(ds.input(i), &mut z)?;
            for j in 0..d {
                sum[j] += z[j];
            }
            rows.extend_from_slice(&z);
        }
        let mu: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut var = vec![0.0; d];
        for row in rows.chunks(d) {
            for j in 0..d {
                var[j] += (row[j] - mu[j]).powi(2);
            }
        }
        let sigma = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Self {
            mu,
            sigma,
            threshold: DEFAULT_THRESHOLD,
        })
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<Self> {
        self.threshold = threshold;
        self.validate()?;
        Ok(self)
    }

    /// A threshold of 0 accepts every surrogate step.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "indicator threshold must lie in [0, 1], got {}",
                self.threshold
            )));
        }
        if self.mu.len() != self.sigma.len() {
            return Err(Error::Dimension {
                expected: self.mu.len(),
                got: self.sigma.len(),
            });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `½ Σ zᵢ²`, that is `−ln p`.
    pub fn neg_log_score(&self, y: &[f64]) -> f64 {
        y.iter()
            .zip(self.mu.iter().zip(&self.sigma))
            .map(|(v, (m, s))| {
                let z = (v - m) / s;
                0.5 * z * z
            })
            .sum()
    }

    /// `p(y)` for a preprocessed input `y`.
    pub fn score(&self, y: &[f64]) -> f64 {
        (-self.neg_log_score(y)).exp()
    }

    /// `p` of a raw input row, preprocessed with `pre`.
    pub fn score_raw(&self, pre: &Preprocessor, raw: &[f64]) -> Result<f64> {
        Ok(self.score(&pre.transform_input(raw)?))
    }

    pub fn accepts(&self, score: f64) -> bool {
        score >= self.threshold
    }
}

/// Outcome of one hybrid step.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridStep {
    pub next: Vec<f64>,
    pub score: f64,
    /// The integrator produced `next`.
    pub fallback: bool,
    /// The surrogate was accepted but returned a non-finite state.
    pub retried: bool,
}

/// One step of length `model.dt` from `(x, t)`.
pub fn hybrid_step(
    model: &MlpModel,
    ind: &IndicatorModel,
    sys: &dyn OdeSystem,
    cfg: &IntegratorConfig,
    x: &[f64],
    t: f64,
    buf: &mut ForwardBuffers,
) -> Result<HybridStep> {
    let input = model.input_for(x, t);
    let score = ind.score_raw(&model.pre, &input).unwrap_or(0.0);
    if ind.accepts(score) {
        let next: Option<Vec<f64>> = model
            .forward_buffered(&input, buf)
            .ok()
            .map(|u| x.iter().zip(u).map(|(a, b)| a + b).collect::<Vec<f64>>())
            .filter(|n| n.iter().all(|v| v.is_finite()));
        if let Some(next) = next {
            return Ok(HybridStep {
                next,
                score,
                fallback: false,
                retried: false,
            });
        }
        return Ok(HybridStep {
            next: advance(sys, x, t, model.dt, cfg)?,
            score,
            fallback: true,
            retried: true,
        });
    }
    Ok(HybridStep {
        next: advance(sys, x, t, model.dt, cfg)?,
        score,
        fallback: true,
        retried: false,
    })
}

#[derive(Debug, Clone)]
pub struct HybridRollout {
    pub trajectory: Trajectory,
    /// `fallback[j]` is set when step `j` used the integrator.
    pub fallback: Vec<bool>,
    pub scores: Vec<f64>,
    /// Steps retried after a non-finite surrogate output.
    pub retries: usize,
}

impl HybridRollout {
    pub fn fallback_fraction(&self) -> f64 {
        self.fallback.iter().filter(|&&f| f).count() as f64 / self.fallback.len().max(1) as f64
    }
}

/// `n_steps` hybrid steps from `(x0, t0)`.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_rollout(
    model: &MlpModel,
    ind: &IndicatorModel,
    sys: &dyn OdeSystem,
    cfg: &IntegratorConfig,
    x0: &[f64],
    t0: f64,
    n_steps: usize,
) -> Result<HybridRollout> {
    ind.validate()?;
    if ind.dim() != model.in_dim() {
        return Err(Error::Dimension {
            expected: model.in_dim(),
            got: ind.dim(),
        });
    }
    if sys.dim() != model.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            got: sys.dim(),
        });
    }
    if x0.len() != model.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            got: x0.len(),
        });
    }
    if n_steps == 0 {
        return Err(Error::Config("rollout needs at least one step".into()));
    }
    let mut traj = Trajectory::new(model.dim());
    traj.push(t0, x0);
    let mut x = x0.to_vec();
    let mut buf = ForwardBuffers::default();
    let mut out = HybridRollout {
        trajectory: Trajectory::new(model.dim()),
        fallback: Vec::with_capacity(n_steps),
        scores: Vec::with_capacity(n_steps),
        retries: 0,
    };
    for j in 0..n_steps {
        let t = t0 + j as f64 * model.dt;
        let step = hybrid_step(model, ind, sys, cfg, &x, t, &mut buf)?;
        out.fallback.push(step.fallback);
        out.scores.push(step.score);
        out.retries += usize::from(step.retried);
        x = step.next;
        traj.push(t0 + (j + 1) as f64 * model.dt, &x);
    }
    out.trajectory = traj;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Provenance;
    use crate::dynamics::LotkaVolterra;
    use crate::surrogate::Mlp;

    fn ind(mu: Vec<f64>, sigma: Vec<f64>) -> IndicatorModel {
        IndicatorModel {
            mu,
            sigma,
            threshold: DEFAULT_THRESHOLD,
        }
    }

    #[test]
    fn score_values() {
        let m = ind(vec![1.0, -2.0], vec![2.0, 0.5]);
        assert_eq!(m.score(&[1.0, -2.0]), 1.0);
        assert!((ind(vec![0.0], vec![1.0]).score(&[1.0]) - 0.606_530_659_712_633_4).abs() < 1e-15);
        assert!((m.score(&[3.0, -1.5]) - 0.367_879_441_171_442_33).abs() < 1e-15);
    }

    #[test]
    fn single_row_fit_is_floored() {
        let mut ds = Dataset::new(2, 0.1, true);
        ds.push(&[3.0, 2.0], None, &[0.0, 0.0], Provenance::Mc).unwrap();
        let m = IndicatorModel::fit(&ds, &Preprocessor::identity(2, 2)).unwrap();
        assert_eq!(m.mu, vec![3.0, 2.0]);
        assert_eq!(m.sigma, vec![STD_FLOOR; 2]);
    }

    #[test]
    fn threshold_is_validated() {
        let m = ind(vec![0.0], vec![1.0]);
        assert!(m.clone().with_threshold(1.0 + 1e-9).is_err());
        assert!(m.clone().with_threshold(-0.1).is_err());
        assert!(m.with_threshold(0.0).is_ok());
    }

    #[test]
    fn far_state_falls_back_to_integrator() {
        let sys = LotkaVolterra::new();
        let mlp = Mlp::zeros(&[2, 4, 2]).unwrap();
        let model = MlpModel::new(mlp, Preprocessor::identity(2, 2), 0.1, true, 0).unwrap();
        let i = ind(vec![2.0, 1.0], vec![1.0, 1.0]);
        let cfg = IntegratorConfig::reference();
        let r = hybrid_rollout(&model, &i, &sys, &cfg, &[50.0, 50.0], 0.0, 1).unwrap();
        assert!(r.scores[0] < 0.5);
        assert_eq!(r.fallback, vec![true]);
        let expect = advance(&sys, &[50.0, 50.0], 0.0, 0.1, &cfg).unwrap();
        assert_eq!(r.trajectory.state(1), expect.as_slice());

        let always = i.with_threshold(0.0).unwrap();
        let r = hybrid_rollout(&model, &always, &sys, &cfg, &[50.0, 50.0], 0.0, 3).unwrap();
        assert_eq!(r.fallback, vec![false; 3]);
        assert_eq!(r.trajectory.last_state(), &[50.0, 50.0]);
    }
}
