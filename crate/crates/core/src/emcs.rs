//! Evolutionary Monte Carlo sampling.
//!
//! 1. [`estimate_range`] integrates a few seed trajectories and records the
//!    componentwise bounds of states and labels (`R_MF`) together with the
//!    initial dataset `D_Init`.
//! 2. [`mc_sample`] draws roots uniformly in the box `R_MF ∩ domain`, per
//!    dimension in linear or log scale, and labels them.
//! 3. [`evolve_augment`] evolves every root through a τ schedule, labels each
//!    chain member and keeps the rows whose labels fall inside the widened
//!    label box ([`filter_by_range`]).
//!
//! [`manifold_sample`] is the trajectory-only baseline.
//!
//! Every sampler is a pure function of its configuration and seed. Each root
//! and each chain draws from its own ChaCha stream, so results do not depend
//! on how rayon schedules the work.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csp::{tau_csp, CspConfig};
use crate::dataset::{Dataset, Provenance};
use crate::dynamics::{OdeSystem, StateDomain};
use crate::error::{Error, Result};
use crate::integrate::{advance, evolve_delta, integrate_grid, IntegratorConfig};

const ROOT_STREAM: u64 = 0x5eed_0001;
const CHAIN_STREAM: u64 = 0x5eed_0002;
const SEED_STREAM: u64 = 0x5eed_0003;

/// Independent generator for `(seed, purpose, index)`.
pub(crate) fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index);
    rng
}

/// Componentwise bounds of states and labels over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeEstimate {
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub u_lo: Vec<f64>,
    pub u_hi: Vec<f64>,
    pub n_trajectories: usize,
    pub dt: f64,
}

impl RangeEstimate {
    /// Bounds over every row of `ds`.
    pub fn from_dataset(ds: &Dataset, n_trajectories: usize) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Range("no rows to estimate ranges from".into()));
        }
        let d = ds.dim();
        let mut r = Self {
            x_lo: vec![f64::INFINITY; d],
            x_hi: vec![f64::NEG_INFINITY; d],
            u_lo: vec![f64::INFINITY; d],
            u_hi: vec![f64::NEG_INFINITY; d],
            n_trajectories,
            dt: ds.dt(),
        };
        for i in 0..ds.len() {
            for j in 0..d {
                let (x, u) = (ds.state(i)[j], ds.label(i)[j]);
                r.x_lo[j] = r.x_lo[j].min(x);
                r.x_hi[j] = r.x_hi[j].max(x);
                r.u_lo[j] = r.u_lo[j].min(u);
                r.u_hi[j] = r.u_hi[j].max(u);
            }
        }
        Ok(r)
    }

    pub fn dim(&self) -> usize {
        self.x_lo.len()
    }

    /// Union with another estimate; never shrinks an interval.
    pub fn merge(&mut self, other: &RangeEstimate) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        if other.dt != self.dt {
            return Err(Error::DtMismatch {
                model: self.dt,
                requested: other.dt,
            });
        }
        for j in 0..self.dim() {
            self.x_lo[j] = self.x_lo[j].min(other.x_lo[j]);
            self.x_hi[j] = self.x_hi[j].max(other.x_hi[j]);
            self.u_lo[j] = self.u_lo[j].min(other.u_lo[j]);
            self.u_hi[j] = self.u_hi[j].max(other.u_hi[j]);
        }
        self.n_trajectories += other.n_trajectories;
        Ok(())
    }

    /// Widened label box `[min(λ₁·u_lo, u_lo), max(λ₂·u_hi, u_hi)]`.
    pub fn label_bounds(&self, lambda1: f64, lambda2: f64) -> Vec<(f64, f64)> {
        self.u_lo
            .iter()
            .zip(&self.u_hi)
            .map(|(&lo, &hi)| ((lambda1 * lo).min(lo), (lambda2 * hi).max(hi)))
            .collect()
    }

    /// Monte Carlo box: the state range intersected with the system domain.
    pub fn sampling_box(&self, domain: &StateDomain) -> Result<Vec<(f64, f64)>> {
        if domain.bounds.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: domain.bounds.len(),
            });
        }
        (0..self.dim())
            .map(|j| {
                let lo = self.x_lo[j].max(domain.bounds[j].0);
                let hi = self.x_hi[j].min(domain.bounds[j].1);
                if lo > hi {
                    Err(Error::Range(format!(
                        "state range of dimension {j} lies outside the system domain"
                    )))
                } else {
                    Ok((lo, hi))
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauStrategy {
    Fixed,
    Increasing,
    CspAdaptive,
    RandomUniform,
}

/// Evolution times of a chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TauSchedule {
    pub strategy: TauStrategy,
    /// Explicit times for `fixed` and `increasing`.
    pub values: Vec<f64>,
    /// Number of evolution steps.
    pub k: usize,
    /// Draw interval for `random_uniform`; clamp interval for `csp_adaptive`.
    pub range: (f64, f64),
    pub csp: CspConfig,
    /// `csp_adaptive` uses `multiplier · τ_csp(x)`.
    pub multiplier: f64,
}

impl Default for TauSchedule {
    fn default() -> Self {
        Self {
            strategy: TauStrategy::Fixed,
            values: Vec::new(),
            k: 0,
            range: (0.0, f64::INFINITY),
            csp: CspConfig::default(),
            multiplier: 1.0,
        }
    }
}

impl TauSchedule {
    /// No evolution.
    pub fn none() -> Self {
        Self::default()
    }

    pub fn fixed(tau: f64, k: usize) -> Self {
        Self {
            values: vec![tau; k],
            k,
            ..Self::default()
        }
    }

    pub fn increasing(values: Vec<f64>) -> Self {
        Self {
            strategy: TauStrategy::Increasing,
            k: values.len(),
            values,
            ..Self::default()
        }
    }

    pub fn random_uniform(k: usize, lo: f64, hi: f64) -> Self {
        Self {
            strategy: TauStrategy::RandomUniform,
            k,
            range: (lo, hi),
            ..Self::default()
        }
    }

    /// `τᵢ = τ_csp(xᵢ)`, clamped to `[lo, hi]`.
    pub fn csp_adaptive(k: usize, csp: CspConfig, lo: f64, hi: f64) -> Self {
        Self {
            strategy: TauStrategy::CspAdaptive,
            k,
            range: (lo, hi),
            csp,
            ..Self::default()
        }
    }

    /// The first `k` steps of this schedule.
    pub fn truncated(&self, k: usize) -> Self {
        let mut s = self.clone();
        s.k = k.min(self.k);
        if !s.values.is_empty() {
            s.values.truncate(s.k);
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("tau schedule: {m}")));
        match self.strategy {
            TauStrategy::Fixed | TauStrategy::Increasing => {
                if self.values.len() != self.k {
                    return bad("k must equal the number of values");
                }
                if self.values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return bad("times must be finite and nonnegative");
                }
                if self.strategy == TauStrategy::Increasing
                    && self.values.windows(2).any(|w| w[1] < w[0])
                {
                    return bad("increasing schedule must be nondecreasing");
                }
            }
            TauStrategy::RandomUniform | TauStrategy::CspAdaptive => {
                let (lo, hi) = self.range;
                if !(lo >= 0.0 && lo <= hi) || (self.strategy == TauStrategy::RandomUniform && !hi.is_finite()) {
                    return bad("range must satisfy 0 ≤ lo ≤ hi");
                }
                if self.strategy == TauStrategy::CspAdaptive {
                    self.csp.validate()?;
                    if !(self.multiplier > 0.0) {
                        return bad("multiplier must be positive");
                    }
                }
            }
        }
        Ok(())
    }

    /// Evolution time of step `i` (1-based) for the chain member `x` at `t`.
    fn tau(&self, i: usize, sys: &dyn OdeSystem, x: &[f64], t: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
        Ok(match self.strategy {
            TauStrategy::Fixed | TauStrategy::Increasing => self.values[i - 1],
            TauStrategy::RandomUniform => {
                let (lo, hi) = self.range;
                if hi > lo {
                    rng.gen_range(lo..hi)
                } else {
                    lo
                }
            }
            TauStrategy::CspAdaptive => {
                let r = tau_csp(sys, x, t, &self.csp)?;
                (self.multiplier * r.tau_csp).clamp(self.range.0, self.range.1)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmcsConfig {
    /// Number of Monte Carlo roots.
    pub n0: usize,
    pub tau: TauSchedule,
    /// Prediction step defining the labels.
    pub dt: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    /// Also drop rows whose state leaves the estimated state range.
    pub filter_states: bool,
    /// Integrator for labels.
    pub label_integrator: IntegratorConfig,
    /// Integrator that moves chain members between evolution steps.
    pub evolve_integrator: IntegratorConfig,
}

impl Default for EmcsConfig {
    fn default() -> Self {
        Self {
            n0: 1000,
            tau: TauSchedule::none(),
            dt: 0.1,
            lambda1: 0.5,
            lambda2: 2.0,
            seed: 0,
            filter_states: false,
            label_integrator: IntegratorConfig::reference(),
            evolve_integrator: IntegratorConfig::reference(),
        }
    }
}

impl EmcsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n0 == 0 {
            return Err(Error::Config("n0 must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.lambda1 > 0.0 && self.lambda2 > 0.0) {
            return Err(Error::Config("filter multipliers must be positive".into()));
        }
        self.label_integrator.validate()?;
        self.evolve_integrator.validate()?;
        self.tau.validate()
    }
}

/// A generated dataset and the number of rows, trajectories or chains lost
/// to integration failures.
#[derive(Debug, Clone)]
pub struct Sampled {
    pub dataset: Dataset,
    pub failures: usize,
}

/// Time feature stored for a row: `t` modulo the forcing period.
fn time_feature(sys: &dyn OdeSystem, t: f64) -> Option<f64> {
    if sys.is_autonomous() {
        None
    } else {
        Some(match sys.forcing_period() {
            Some(p) => t.rem_euclid(p),
            None => t,
        })
    }
}

type Row = (Vec<f64>, Option<f64>, Vec<f64>);

/// States every `sample_every` along the trajectory from `x0` (at t = 0),
/// each labelled with `evolve_delta`.
fn trajectory_rows(
    sys: &dyn OdeSystem,
    x0: &[f64],
    n_points: usize,
    sample_every: f64,
    dt: f64,
    cfg: &IntegratorConfig,
) -> Result<Vec<Row>> {
    if n_points > 0 && (sample_every - dt).abs() <= 1e-12 * dt {
        // labels are differences of consecutive grid states
        let grid: Vec<f64> = (1..=n_points).map(|i| i as f64 * dt).collect();
        let traj = integrate_grid(sys, x0, 0.0, &grid, cfg)?;
        return Ok((0..n_points)
            .map(|i| {
                let (x, next) = (traj.state(i), traj.state(i + 1));
                let u = next.iter().zip(x).map(|(a, b)| a - b).collect();
                (x.to_vec(), time_feature(sys, traj.times()[i]), u)
            })
            .collect());
    }
    let mut states = vec![(0.0, x0.to_vec())];
    if n_points > 1 {
        let grid: Vec<f64> = (1..n_points).map(|i| i as f64 * sample_every).collect();
        let traj = integrate_grid(sys, x0, 0.0, &grid, cfg)?;
        states = (0..traj.len()).map(|i| (traj.times()[i], traj.state(i).to_vec())).collect();
    }
    states
        .into_iter()
        .map(|(t, x)| {
            let u = evolve_delta(sys, &x, t, dt, cfg)?;
            Ok((x, time_feature(sys, t), u))
        })
        .collect()
}

fn collect_rows(
    sys: &dyn OdeSystem,
    dt: f64,
    per_traj: Vec<Result<Vec<Row>>>,
    prov: Provenance,
) -> Result<(Dataset, usize, usize)> {
    let mut ds = Dataset::new(sys.dim(), dt, sys.is_autonomous());
    let mut failures = 0;
    let mut ok = 0;
    for rows in per_traj {
        match rows {
            Ok(rows) => {
                ok += 1;
                for (x, t, u) in rows {
                    ds.push(&x, t, &u, prov)?;
                }
            }
            Err(_) => failures += 1,
        }
    }
    Ok((ds, ok, failures))
}

/// Result of [`estimate_range`].
#[derive(Debug, Clone)]
pub struct RangeResult {
    pub range: RangeEstimate,
    /// `D_Init`: every sampled state with its label.
    pub dataset: Dataset,
    /// Seeds whose trajectory failed and was skipped.
    pub failures: usize,
}

/// Step 1: integrates each seed to `t_end`, samples every `sample_every`
/// (including `t = 0`) and labels the samples.
pub fn estimate_range(
    sys: &dyn OdeSystem,
    seeds: &[Vec<f64>],
    t_end: f64,
    sample_every: f64,
    dt: f64,
    cfg: &IntegratorConfig,
) -> Result<RangeResult> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    if !(t_end > 0.0 && sample_every > 0.0 && dt > 0.0) {
        return Err(Error::Config("t_end, sample_every and dt must be positive".into()));
    }
    if let Some(s) = seeds.iter().find(|s| s.len() != sys.dim()) {
        return Err(Error::Dimension {
            expected: sys.dim(),
            got: s.len(),
        });
    }
    let n_points = (t_end / sample_every * (1.0 + 1e-12)).floor() as usize + 1;
    let per_traj: Vec<_> = seeds
        .par_iter()
        .map(|s| trajectory_rows(sys, s, n_points, sample_every, dt, cfg))
        .collect();
    let (dataset, ok, failures) = collect_rows(sys, dt, per_traj, Provenance::Manifold)?;
    if ok == 0 {
        return Err(Error::Range(format!("all {} seed trajectories failed", seeds.len())));
    }
    let range = RangeEstimate::from_dataset(&dataset, ok)?;
    Ok(RangeResult {
        range,
        dataset,
        failures,
    })
}

/// `n` seeds drawn uniformly in `bounds`.
pub fn random_seeds(bounds: &[(f64, f64)], n: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, SEED_STREAM, i as u64);
            bounds.iter().map(|&(lo, hi)| uniform(&mut rng, lo, hi)).collect()
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Step 2 for roots `0..cfg.n0`.
pub fn mc_sample(range: &RangeEstimate, sys: &dyn OdeSystem, cfg: &EmcsConfig) -> Result<Sampled> {
    mc_sample_roots(range, sys, cfg, 0, cfg.n0)
}

/// Step 2 for roots `start..start + count`. Root `i` always draws the same
/// point for a given seed, so batches can be extended.
pub fn mc_sample_roots(
    range: &RangeEstimate,
    sys: &dyn OdeSystem,
    cfg: &EmcsConfig,
    start: usize,
    count: usize,
) -> Result<Sampled> {
    cfg.validate()?;
    if range.dt != cfg.dt {
        return Err(Error::DtMismatch {
            model: range.dt,
            requested: cfg.dt,
        });
    }
    let domain = sys.domain();
    let bounds = range.sampling_box(domain)?;
    for (j, &(lo, _)) in bounds.iter().enumerate() {
        if domain.log_scale.get(j).copied().unwrap_or(false) && !(lo > 0.0) {
            return Err(Error::Config(format!(
                "log-scale dimension {j} needs a positive lower bound, got {lo}"
            )));
        }
    }
    let period = sys.forcing_period();
    let rows: Vec<Option<Row>> = (start..start + count)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, ROOT_STREAM, i as u64);
            let x: Vec<f64> = bounds
                .iter()
                .enumerate()
                .map(|(j, &(lo, hi))| {
                    if domain.log_scale.get(j).copied().unwrap_or(false) {
                        uniform(&mut rng, lo.ln(), hi.ln()).exp()
                    } else {
                        uniform(&mut rng, lo, hi)
                    }
                })
                .collect();
            let t = if sys.is_autonomous() {
                0.0
            } else {
                rng.gen_range(0.0..period.unwrap_or(1.0))
            };
            let u = evolve_delta(sys, &x, t, cfg.dt, &cfg.label_integrator).ok()?;
            Some((x, time_feature(sys, t), u))
        })
        .collect();
    let mut ds = Dataset::new(sys.dim(), cfg.dt, sys.is_autonomous());
    let mut failures = 0;
    for row in rows {
        match row {
            Some((x, t, u)) => ds.push(&x, t, &u, Provenance::Mc)?,
            None => failures += 1,
        }
    }
    Ok(Sampled {
        dataset: ds,
        failures,
    })
}

/// Keeps rows whose label lies in the widened label box, in order.
pub fn filter_by_range(ds: &Dataset, range: &RangeEstimate, lambda1: f64, lambda2: f64) -> Result<Dataset> {
    if ds.dt() != range.dt {
        return Err(Error::DtMismatch {
            model: range.dt,
            requested: ds.dt(),
        });
    }
    if ds.dim() != range.dim() {
        return Err(Error::Dimension {
            expected: range.dim(),
            got: ds.dim(),
        });
    }
    let bounds = range.label_bounds(lambda1, lambda2);
    Ok(ds.filter_rows(|i| {
        ds.label(i)
            .iter()
            .zip(&bounds)
            .all(|(u, (lo, hi))| *u >= *lo && *u <= *hi)
    }))
}

/// Keeps rows whose state lies in the estimated state range.
pub fn filter_states(ds: &Dataset, range: &RangeEstimate) -> Dataset {
    ds.filter_rows(|i| {
        ds.state(i)
            .iter()
            .enumerate()
            .all(|(j, x)| *x >= range.x_lo[j] && *x <= range.x_hi[j])
    })
}

/// Step 3: evolves every root of `ds_mc` through the τ schedule, labels each
/// chain member and filters the merged rows. Root labels are reused.
///
/// A chain whose evolution or labelling fails is truncated at that step and
/// counted in `failures`.
pub fn evolve_augment(
    ds_mc: &Dataset,
    sys: &dyn OdeSystem,
    cfg: &EmcsConfig,
    range: &RangeEstimate,
) -> Result<Sampled> {
    evolve_augment_from(ds_mc, sys, cfg, range, 0)
}

/// As [`evolve_augment`], with chain RNG streams numbered from `first_root`.
pub fn evolve_augment_from(
    ds_mc: &Dataset,
    sys: &dyn OdeSystem,
    cfg: &EmcsConfig,
    range: &RangeEstimate,
    first_root: usize,
) -> Result<Sampled> {
    cfg.validate()?;
    if ds_mc.dt() != cfg.dt {
        return Err(Error::DtMismatch {
            model: ds_mc.dt(),
            requested: cfg.dt,
        });
    }
    if ds_mc.dim() != sys.dim() {
        return Err(Error::Dimension {
            expected: sys.dim(),
            got: ds_mc.dim(),
        });
    }
    let chains: Vec<(Vec<Row>, bool)> = (0..ds_mc.len())
        .into_par_iter()
        .map(|c| {
            let x0 = ds_mc.state(c).to_vec();
            let t0 = ds_mc.time(c);
            let mut rows = vec![(x0.clone(), t0, ds_mc.label(c).to_vec())];
            let mut rng = stream_rng(cfg.seed, CHAIN_STREAM, (first_root + c) as u64);
            let mut x = x0;
            let mut t = t0.unwrap_or(0.0);
            for i in 1..=cfg.tau.k {
                let step = (|| -> Result<(Vec<f64>, f64, Vec<f64>)> {
                    let tau = cfg.tau.tau(i, sys, &x, t, &mut rng)?;
                    let next = if tau > 0.0 {
                        advance(sys, &x, t, tau, &cfg.evolve_integrator)?
                    } else {
                        x.clone()
                    };
                    let u = evolve_delta(sys, &next, t + tau, cfg.dt, &cfg.label_integrator)?;
                    Ok((next, t + tau, u))
                })();
                match step {
                    Ok((next, t_next, u)) => {
                        x = next;
                        t = t_next;
                        rows.push((x.clone(), time_feature(sys, t), u));
                    }
                    Err(_) => return (rows, true),
                }
            }
            (rows, false)
        })
        .collect();

    let mut merged = Dataset::new(sys.dim(), cfg.dt, sys.is_autonomous());
    let mut failures = 0;
    for (c, (rows, failed)) in chains.into_iter().enumerate() {
        failures += usize::from(failed);
        for (i, (x, t, u)) in rows.into_iter().enumerate() {
            let prov = if i == 0 {
                ds_mc.provenance(c)
            } else {
                Provenance::Evolution(i as u32)
            };
            merged.push(&x, t, &u, prov)?;
        }
    }
    let mut out = filter_by_range(&merged, range, cfg.lambda1, cfg.lambda2)?;
    if cfg.filter_states {
        out = filter_states(&out, range);
    }
    Ok(Sampled {
        dataset: out,
        failures,
    })
}

/// Steps 2 and 3.
pub fn emcs_sample(range: &RangeEstimate, sys: &dyn OdeSystem, cfg: &EmcsConfig) -> Result<Sampled> {
    let mc = mc_sample(range, sys, cfg)?;
    let mut out = evolve_augment(&mc.dataset, sys, cfg, range)?;
    out.failures += mc.failures;
    Ok(out)
}

/// EMCS with exactly `budget` rows: roots are added in batches until the
/// filtered output reaches the budget, then the output is cut to size.
pub fn emcs_sample_budget(
    range: &RangeEstimate,
    sys: &dyn OdeSystem,
    cfg: &EmcsConfig,
    budget: usize,
) -> Result<Sampled> {
    let per_root = cfg.tau.k + 1;
    let mut ds = Dataset::new(sys.dim(), cfg.dt, sys.is_autonomous());
    let mut failures = 0;
    let mut next_root = 0;
    let mut batch = budget.div_ceil(per_root).max(1);
    for _ in 0..64 {
        let mc = mc_sample_roots(range, sys, cfg, next_root, batch)?;
        let out = evolve_augment_from(&mc.dataset, sys, cfg, range, next_root)?;
        failures += mc.failures + out.failures;
        ds.extend(&out.dataset)?;
        next_root += batch;
        if ds.len() >= budget {
            return Ok(Sampled {
                dataset: ds.truncated(budget),
                failures,
            });
        }
        // grow the next batch from the observed yield per root
        let yield_per_root = ds.len() as f64 / next_root as f64;
        let missing = (budget - ds.len()) as f64;
        batch = ((missing / yield_per_root.max(0.01)) * 1.1).ceil() as usize + 1;
    }
    Err(Error::Range(format!(
        "could not reach a budget of {budget} rows; the filter rejects almost every sample"
    )))
}

/// Configuration of the trajectory-only baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManifoldConfig {
    pub n_seeds: usize,
    pub n_per_traj: usize,
    pub sample_every: f64,
    pub dt: f64,
    pub seed: u64,
    /// Box for the initial states; the system domain when absent.
    pub seed_box: Option<Vec<(f64, f64)>>,
    pub integrator: IntegratorConfig,
}

impl Default for ManifoldConfig {
    fn default() -> Self {
        Self {
            n_seeds: 10,
            n_per_traj: 100,
            sample_every: 0.1,
            dt: 0.1,
            seed: 0,
            seed_box: None,
            integrator: IntegratorConfig::reference(),
        }
    }
}

/// Manifold baseline: random seeds, `n_per_traj` states at a fixed interval
/// along each trajectory, labelled with `evolve_delta`.
pub fn manifold_sample(sys: &dyn OdeSystem, cfg: &ManifoldConfig) -> Result<Sampled> {
    if cfg.n_seeds == 0 || cfg.n_per_traj == 0 {
        return Err(Error::Config("n_seeds and n_per_traj must be at least 1".into()));
    }
    if !(cfg.sample_every > 0.0 && cfg.dt > 0.0) {
        return Err(Error::Config("sample_every and dt must be positive".into()));
    }
    let bounds = cfg.seed_box.clone().unwrap_or_else(|| sys.domain().bounds.clone());
    let seeds = random_seeds(&bounds, cfg.n_seeds, cfg.seed);
    manifold_from_seeds(sys, &seeds, cfg)
}

/// Manifold sampling from explicit seeds.
pub fn manifold_from_seeds(sys: &dyn OdeSystem, seeds: &[Vec<f64>], cfg: &ManifoldConfig) -> Result<Sampled> {
    let per_traj: Vec<_> = seeds
        .par_iter()
        .map(|s| trajectory_rows(sys, s, cfg.n_per_traj, cfg.sample_every, cfg.dt, &cfg.integrator))
        .collect();
    let (dataset, ok, failures) = collect_rows(sys, cfg.dt, per_traj, Provenance::Manifold)?;
    if ok == 0 {
        return Err(Error::Range(format!("all {} manifold trajectories failed", seeds.len())));
    }
    Ok(Sampled { dataset, failures })
}
