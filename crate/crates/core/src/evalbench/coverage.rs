//! Characteristic-time coverage of EMCS chains.

use crate::csp::{timescale_histogram, CspConfig, LogBins, StepHistogram, TimeMode};
use crate::dataset::Dataset;
use crate::dynamics::OdeSystem;
use crate::emcs::{evolve_augment, mc_sample, EmcsConfig, RangeEstimate, TauSchedule};
use crate::error::Result;
use crate::integrate::IntegratorConfig;

/// Roots in the system domain evolved through `tau`, without label filtering.
pub fn unfiltered_chains(
    sys: &dyn OdeSystem,
    n_roots: usize,
    tau: &TauSchedule,
    dt: f64,
    seed: u64,
    integrator: IntegratorConfig,
) -> Result<Dataset> {
    let d = sys.dim();
    let domain = sys.domain();
    let range = RangeEstimate {
        x_lo: domain.lower(),
        x_hi: domain.upper(),
        u_lo: vec![f64::NEG_INFINITY; d],
        u_hi: vec![f64::INFINITY; d],
        n_trajectories: 0,
        dt,
    };
    let cfg = EmcsConfig {
        n0: n_roots,
        tau: tau.clone(),
        dt,
        seed,
        label_integrator: integrator,
        evolve_integrator: integrator,
        ..EmcsConfig::default()
    };
    let mc = mc_sample(&range, sys, &cfg)?;
    Ok(evolve_augment(&mc.dataset, sys, &cfg, &range)?.dataset)
}

#[derive(Debug, Clone)]
pub struct CoverageReport {
    pub histograms: Vec<StepHistogram>,
    /// Occupied bins of step 0 and of the union over all steps.
    pub step0_bins: Vec<usize>,
    pub union_bins: Vec<usize>,
    /// L1 distance between consecutive steps.
    pub consecutive_l1: Vec<f64>,
}

impl CoverageReport {
    pub fn strict_superset(&self) -> bool {
        self.union_bins.len() > self.step0_bins.len() && self.step0_bins.iter().all(|b| self.union_bins.contains(b))
    }

    /// Fraction of consecutive pairs whose L1 distance exceeds `threshold`.
    pub fn fraction_distinct(&self, threshold: f64) -> f64 {
        let n = self.consecutive_l1.len().max(1) as f64;
        self.consecutive_l1.iter().filter(|&&d| d > threshold).count() as f64 / n
    }
}

pub fn timescale_coverage(
    ds: &Dataset,
    sys: &dyn OdeSystem,
    mode: TimeMode,
    bins: &LogBins,
    csp: &CspConfig,
) -> Result<CoverageReport> {
    let histograms = timescale_histogram(ds, sys, mode, bins, csp)?;
    let step0_bins = histograms.first().map(|h| h.occupied()).unwrap_or_default();
    let mut union_bins: Vec<usize> = histograms.iter().flat_map(|h| h.occupied()).collect();
    union_bins.sort_unstable();
    union_bins.dedup();
    let consecutive_l1 = histograms.windows(2).map(|w| w[0].l1(&w[1])).collect();
    Ok(CoverageReport {
        histograms,
        step0_bins,
        union_bins,
        consecutive_l1,
    })
}
