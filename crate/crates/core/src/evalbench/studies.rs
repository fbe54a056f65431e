//! Multi-seed studies built from the pipeline: sampling comparison and the
//! τ-schedule ablation.

use crate::config::RunConfig;
use crate::error::{Error, Result};

use super::metrics::median;
use super::pipeline::{compare_sampling, compare_tau_strategies, SamplingMethod, SweepRow};

#[derive(Debug, Clone)]
pub struct SamplingStudy {
    /// Every run, ranked within its seed.
    pub rows: Vec<(u64, SweepRow)>,
    /// Median scalar RMSE per method over seeds.
    pub medians: Vec<(SamplingMethod, f64)>,
}

impl SamplingStudy {
    pub fn median_of(&self, m: SamplingMethod) -> Option<f64> {
        self.medians.iter().find(|(k, _)| *k == m).map(|(_, v)| *v)
    }

    /// EMCS median strictly below every other method's median.
    pub fn emcs_wins(&self) -> bool {
        let Some(e) = self.median_of(SamplingMethod::Emcs) else {
            return false;
        };
        self.medians
            .iter()
            .filter(|(m, _)| *m != SamplingMethod::Emcs)
            .all(|(_, v)| e < *v)
    }
}

/// Each method of `cfg.compare.methods` for each seed, equal budgets.
pub fn sampling_study(cfg: &RunConfig) -> Result<SamplingStudy> {
    let spec = &cfg.compare;
    if spec.seeds.is_empty() || spec.methods.is_empty() {
        return Err(Error::Config("sampling study needs seeds and methods".into()));
    }
    let mut base = cfg.experiment.clone();
    if let Some(tau) = &spec.emcs_tau {
        base = base.with_tau(tau.clone());
    }
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let cfgs: Vec<_> = spec
            .methods
            .iter()
            .map(|&m| base.clone().with_seed(seed).with_sampling(m))
            .collect();
        for row in compare_sampling(&cfgs)? {
            rows.push((seed, row));
        }
    }
    let medians = spec
        .methods
        .iter()
        .map(|&m| {
            let v: Vec<f64> = spec
                .seeds
                .iter()
                .map(|&s| {
                    rows.iter()
                        .find(|(seed, r)| *seed == s && r.label == format!("{m}:{s}"))
                        .map_or(f64::INFINITY, |(_, r)| r.scalar_rmse())
                })
                .collect();
            (m, median(&v))
        })
        .collect();
    Ok(SamplingStudy { rows, medians })
}

#[derive(Debug, Clone)]
pub struct TauStudy {
    /// `(seed, schedule name, row)`.
    pub strategies: Vec<(u64, SweepRow)>,
    /// `(seed, k, row)`.
    pub ablation: Vec<(u64, usize, SweepRow)>,
    /// Median scalar RMSE per schedule name.
    pub strategy_medians: Vec<(String, f64)>,
    /// Median scalar RMSE per `k`, in the order of `cfg.compare.ks`.
    pub k_medians: Vec<(usize, f64)>,
}

impl TauStudy {
    pub fn nonincreasing_in_k(&self) -> bool {
        self.k_medians.windows(2).all(|w| w[1].1 <= w[0].1)
    }
}

/// Schedules from `cfg.compare.schedules` and the ablation over
/// `cfg.compare.ks`, for every seed.
pub fn tau_study(cfg: &RunConfig) -> Result<TauStudy> {
    let spec = &cfg.compare;
    let schedules: Vec<_> = spec.schedules.iter().map(|s| (s.name.clone(), s.tau.clone())).collect();
    let mut strategies = Vec::new();
    let mut ablation = Vec::new();
    for &seed in &spec.seeds {
        let base = cfg.experiment.clone().with_seed(seed);
        let cmp = compare_tau_strategies(&base, &schedules, &spec.increasing, &spec.ks)?;
        strategies.extend(cmp.strategies.into_iter().map(|r| (seed, r)));
        ablation.extend(cmp.ablation.into_iter().map(|(k, r)| (seed, k, r)));
    }
    let strategy_medians = schedules
        .iter()
        .map(|(name, _)| {
            let v: Vec<f64> = strategies
                .iter()
                .filter(|(_, r)| &r.label == name)
                .map(|(_, r)| r.scalar_rmse())
                .collect();
            (name.clone(), median(&v))
        })
        .collect();
    let k_medians = spec
        .ks
        .iter()
        .map(|&k| {
            let v: Vec<f64> = ablation
                .iter()
                .filter(|(_, kk, _)| *kk == k)
                .map(|(_, _, r)| r.scalar_rmse())
                .collect();
            (k, median(&v))
        })
        .collect();
    Ok(TauStudy {
        strategies,
        ablation,
        strategy_medians,
        k_medians,
    })
}
