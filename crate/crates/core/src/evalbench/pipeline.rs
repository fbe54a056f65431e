//! End-to-end experiments: sample, train, roll out, compare.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::csp::LogBins;
use crate::dataset::Dataset;
use crate::dynamics::{system_by_name, OdeSystem};
use crate::emcs::{
    emcs_sample_budget, estimate_range, manifold_sample, random_seeds, EmcsConfig, ManifoldConfig, RangeEstimate,
    Sampled, TauSchedule,
};
use crate::error::{Error, Result};
use crate::integrate::{integrate_grid, IntegratorConfig, Trajectory};
use crate::surrogate::{rollout, train, History, MlpModel, Rollout, TrainConfig};

use super::metrics::{config_hash, log_histogram, relative_errors, rollout_rmse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMethod {
    /// Range estimation and filtered Monte Carlo, without evolution.
    Mc,
    /// States along trajectories from random seeds.
    Manifold,
    Emcs,
}

impl std::fmt::Display for SamplingMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplingMethod::Mc => "mc",
            SamplingMethod::Manifold => "manifold",
            SamplingMethod::Emcs => "emcs",
        })
    }
}

/// Step 1 of EMCS: seed trajectories for the range estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RangeSpec {
    pub n_seeds: usize,
    pub t_end: f64,
    pub sample_every: f64,
    /// Box for the seeds; the system domain when absent.
    pub seed_box: Option<Vec<(f64, f64)>>,
    pub integrator: IntegratorConfig,
}

impl Default for RangeSpec {
    fn default() -> Self {
        Self {
            n_seeds: 16,
            t_end: 10.0,
            sample_every: 0.1,
            seed_box: None,
            integrator: IntegratorConfig::reference(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutSpec {
    pub x0: Vec<f64>,
    pub t0: f64,
    pub n_steps: usize,
}

impl Default for RolloutSpec {
    fn default() -> Self {
        Self {
            x0: Vec::new(),
            t0: 0.0,
            n_steps: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub system: String,
    pub sampling: SamplingMethod,
    /// Rows in the training dataset.
    pub budget: usize,
    /// Overrides the seeds of every stage.
    pub seed: u64,
    pub range: RangeSpec,
    pub emcs: EmcsConfig,
    pub manifold: ManifoldConfig,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub rollout: RolloutSpec,
    /// Integrator for reference trajectories.
    pub reference: IntegratorConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: String::new(),
            system: String::new(),
            sampling: SamplingMethod::Emcs,
            budget: 10_000,
            seed: 0,
            range: RangeSpec::default(),
            emcs: EmcsConfig::default(),
            manifold: ManifoldConfig::default(),
            hidden: vec![200, 200, 200],
            train: TrainConfig::default(),
            rollout: RolloutSpec::default(),
            reference: IntegratorConfig::reference().with_tolerances(1e-10, 1e-12),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let sys = system_by_name(&self.system)?;
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        if self.rollout.n_steps == 0 {
            return Err(Error::Config("rollout horizon must be positive".into()));
        }
        if self.rollout.x0.len() != sys.dim() {
            return Err(Error::Dimension {
                expected: sys.dim(),
                got: self.rollout.x0.len(),
            });
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden layers must be nonempty and positive".into()));
        }
        if self.sampling == SamplingMethod::Manifold && self.budget % self.manifold.n_per_traj != 0 {
            return Err(Error::Config(format!(
                "manifold budget {} is not a multiple of n_per_traj {}",
                self.budget, self.manifold.n_per_traj
            )));
        }
        self.emcs.validate()?;
        self.train.validate()?;
        self.reference.validate()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_sampling(mut self, sampling: SamplingMethod) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn with_tau(mut self, tau: TauSchedule) -> Self {
        self.emcs.tau = tau;
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad experiment config: {e}")))
    }

    pub fn hash(&self) -> String {
        config_hash(&self.to_toml().unwrap_or_default())
    }

    /// Layer sizes including input and output.
    pub fn layer_sizes(&self, ds: &Dataset) -> Vec<usize> {
        let mut s = vec![ds.in_dim()];
        s.extend(&self.hidden);
        s.push(ds.dim());
        s
    }

    fn emcs_config(&self) -> EmcsConfig {
        let mut c = self.emcs.clone();
        c.seed = self.seed;
        if self.sampling == SamplingMethod::Mc {
            c.tau = TauSchedule::none();
        }
        c
    }
}

/// Step 1 for `cfg`.
pub fn range_for(cfg: &ExperimentConfig, sys: &dyn OdeSystem) -> Result<RangeEstimate> {
    let bounds = cfg.range.seed_box.clone().unwrap_or_else(|| sys.domain().bounds.clone());
    let seeds = random_seeds(&bounds, cfg.range.n_seeds, cfg.seed);
    let r = estimate_range(sys, &seeds, cfg.range.t_end, cfg.range.sample_every, cfg.emcs.dt, &cfg.range.integrator)?;
    Ok(r.range)
}

/// Training data for `cfg`, exactly `cfg.budget` rows.
pub fn generate_dataset(cfg: &ExperimentConfig, sys: &dyn OdeSystem) -> Result<Sampled> {
    match cfg.sampling {
        SamplingMethod::Mc | SamplingMethod::Emcs => {
            let range = range_for(cfg, sys)?;
            emcs_sample_budget(&range, sys, &cfg.emcs_config(), cfg.budget)
        }
        SamplingMethod::Manifold => {
            let mut m = cfg.manifold.clone();
            m.seed = cfg.seed;
            m.dt = cfg.emcs.dt;
            m.n_seeds = cfg.budget / m.n_per_traj;
            let mut s = manifold_sample(sys, &m)?;
            if s.dataset.len() > cfg.budget {
                s.dataset = s.dataset.truncated(cfg.budget);
            }
            Ok(s)
        }
    }
}

/// Reference states on the rollout grid.
pub fn reference_trajectory(cfg: &ExperimentConfig, sys: &dyn OdeSystem) -> Result<Trajectory> {
    let r = &cfg.rollout;
    let dt = cfg.emcs.dt;
    let grid: Vec<f64> = (1..=r.n_steps).map(|j| r.t0 + j as f64 * dt).collect();
    integrate_grid(sys, &r.x0, r.t0, &grid, &cfg.reference)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub name: String,
    pub sampling: SamplingMethod,
    pub seed: u64,
    pub rows: usize,
    pub sampling_failures: usize,
    /// Mean absolute one-step error along the reference trajectory.
    pub one_step_mae: f64,
    /// Fractions per bin of one-step relative errors.
    pub rel_error_hist: Vec<f64>,
    pub rel_error_bins: LogBins,
    pub rollout_rmse_per_dim: Vec<f64>,
    pub rollout_rmse_scalar: f64,
    /// Step at which the rollout became non-finite.
    pub truncated_at: Option<usize>,
    pub final_train_mae: f64,
    pub final_val_mae: f64,
    pub config_hash: String,
}

impl MetricsReport {
    /// `key=value` lines.
    pub fn to_kv(&self, prefix: &str) -> String {
        let mut s = String::new();
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "{prefix}name={}", self.name);
        let _ = writeln!(s, "{prefix}sampling={}", self.sampling);
        let _ = writeln!(s, "{prefix}seed={}", self.seed);
        let _ = writeln!(s, "{prefix}rows={}", self.rows);
        let _ = writeln!(s, "{prefix}sampling_failures={}", self.sampling_failures);
        let _ = writeln!(s, "{prefix}one_step_mae={:e}", self.one_step_mae);
        let _ = writeln!(s, "{prefix}rel_error_floor={:e}", super::metrics::REL_ERROR_FLOOR);
        let _ = writeln!(s, "{prefix}rel_error_hist={}", join(&self.rel_error_hist));
        let _ = writeln!(s, "{prefix}rollout_rmse_per_dim={}", join(&self.rollout_rmse_per_dim));
        let _ = writeln!(s, "{prefix}rollout_rmse_scalar={:e}", self.rollout_rmse_scalar);
        let trunc = self.truncated_at.map_or("none".to_string(), |j| j.to_string());
        let _ = writeln!(s, "{prefix}rollout_truncated_at={trunc}");
        let _ = writeln!(s, "{prefix}final_train_mae={:e}", self.final_train_mae);
        let _ = writeln!(s, "{prefix}final_val_mae={:e}", self.final_val_mae);
        let _ = writeln!(s, "{prefix}config_hash={}", self.config_hash);
        s
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub dataset: Dataset,
    pub model: MlpModel,
    pub history: History,
    pub rollout: Rollout,
    pub reference: Trajectory,
    pub metrics: MetricsReport,
}

/// Evaluates a trained model against `reference`.
pub fn evaluate(
    cfg: &ExperimentConfig,
    model: &MlpModel,
    reference: &Trajectory,
) -> Result<(Rollout, MetricsReport)> {
    let r = &cfg.rollout;
    let ro = rollout(model, &r.x0, r.t0, r.n_steps)?;
    let rmse = rollout_rmse(&ro.trajectory, reference)?;
    // a diverged rollout counts as infinitely wrong
    let (per_dim, scalar) = if ro.truncated_at.is_some() {
        (vec![f64::INFINITY; model.dim()], f64::INFINITY)
    } else {
        (rmse.per_dim, rmse.scalar)
    };
    let mut abs_sum = 0.0;
    let mut rel = Vec::new();
    let steps = reference.len() - 1;
    for j in 0..steps {
        let (x, t) = (reference.state(j), reference.times()[j]);
        let truth: Vec<f64> = reference.state(j + 1).iter().zip(x).map(|(a, b)| a - b).collect();
        let pred = model.forward(&model.input_for(x, t))?;
        abs_sum += pred.iter().zip(&truth).map(|(p, q)| (p - q).abs()).sum::<f64>() / truth.len() as f64;
        rel.extend(relative_errors(&pred, &truth));
    }
    let bins = LogBins {
        lo: 1e-8,
        hi: 1e2,
        n: 20,
    };
    let report = MetricsReport {
        name: cfg.name.clone(),
        sampling: cfg.sampling,
        seed: cfg.seed,
        rows: 0,
        sampling_failures: 0,
        one_step_mae: abs_sum / steps.max(1) as f64,
        rel_error_hist: log_histogram(&rel, &bins),
        rel_error_bins: bins,
        rollout_rmse_per_dim: per_dim,
        rollout_rmse_scalar: scalar,
        truncated_at: ro.truncated_at,
        final_train_mae: f64::NAN,
        final_val_mae: f64::NAN,
        config_hash: cfg.hash(),
    };
    Ok((ro, report))
}

/// Trains on an existing dataset and evaluates.
pub fn train_and_evaluate(
    cfg: &ExperimentConfig,
    sys: &dyn OdeSystem,
    dataset: Dataset,
    failures: usize,
    reference: &Trajectory,
) -> Result<ExperimentResult> {
    let mut tc = cfg.train.clone();
    tc.seed = cfg.seed;
    let (model, history) = train(&dataset, &cfg.layer_sizes(&dataset), &tc)?;
    let model = model.with_system(sys)?;
    let (ro, mut metrics) = evaluate(cfg, &model, reference)?;
    metrics.rows = dataset.len();
    metrics.sampling_failures = failures;
    metrics.final_train_mae = history.train_mae.last().copied().unwrap_or(f64::NAN);
    metrics.final_val_mae = history.val_mae.last().copied().unwrap_or(f64::NAN);
    Ok(ExperimentResult {
        dataset,
        model,
        history,
        rollout: ro,
        reference: reference.clone(),
        metrics,
    })
}

/// Sample, train and evaluate one configuration.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let sys = system_by_name(&cfg.system)?;
    let reference = reference_trajectory(cfg, sys.as_ref())?;
    let sampled = generate_dataset(cfg, sys.as_ref())?;
    train_and_evaluate(cfg, sys.as_ref(), sampled.dataset, sampled.failures, &reference)
}

/// One entry of a sweep; failed pipelines keep their error message.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub label: String,
    pub outcome: std::result::Result<MetricsReport, String>,
}

impl SweepRow {
    pub fn scalar_rmse(&self) -> f64 {
        self.outcome.as_ref().map_or(f64::INFINITY, |m| m.rollout_rmse_scalar)
    }
}

fn run_row(label: String, cfg: &ExperimentConfig) -> SweepRow {
    SweepRow {
        label,
        outcome: run_experiment(cfg).map(|r| r.metrics).map_err(|e| e.to_string()),
    }
}

/// Runs every configuration and ranks them by scalar rollout RMSE. All
/// configurations must share one dataset budget.
pub fn compare_sampling(cfgs: &[ExperimentConfig]) -> Result<Vec<SweepRow>> {
    if let Some(first) = cfgs.first() {
        if let Some(bad) = cfgs.iter().find(|c| c.budget != first.budget) {
            return Err(Error::Config(format!(
                "dataset budgets differ: {} has {}, {} has {}",
                first.name, first.budget, bad.name, bad.budget
            )));
        }
    }
    let mut rows: Vec<SweepRow> = cfgs
        .iter()
        .map(|c| run_row(format!("{}:{}", c.sampling, c.seed), c))
        .collect();
    rows.sort_by(|a, b| a.scalar_rmse().total_cmp(&b.scalar_rmse()));
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct TauComparison {
    /// One row per named schedule.
    pub strategies: Vec<SweepRow>,
    /// `(k, row)` for the increasing schedule truncated to `k` steps.
    pub ablation: Vec<(usize, SweepRow)>,
}

/// EMCS with each schedule from the same Monte Carlo roots, plus a step-count
/// ablation of `increasing`. `k = 0` runs the pure Monte Carlo pipeline.
pub fn compare_tau_strategies(
    base: &ExperimentConfig,
    schedules: &[(String, TauSchedule)],
    increasing: &TauSchedule,
    ks: &[usize],
) -> Result<TauComparison> {
    for (_, s) in schedules {
        s.validate()?;
    }
    if let Some(&k) = ks.iter().find(|&&k| k > increasing.k) {
        return Err(Error::Config(format!(
            "ablation step {k} exceeds the schedule length {}",
            increasing.k
        )));
    }
    let strategies = schedules
        .iter()
        .map(|(name, s)| {
            let cfg = base.clone().with_sampling(SamplingMethod::Emcs).with_tau(s.clone());
            run_row(name.clone(), &cfg)
        })
        .collect();
    let ablation = ks
        .iter()
        .map(|&k| {
            let cfg = if k == 0 {
                base.clone().with_sampling(SamplingMethod::Mc)
            } else {
                base.clone()
                    .with_sampling(SamplingMethod::Emcs)
                    .with_tau(increasing.truncated(k))
            };
            (k, run_row(format!("k={k}"), &cfg))
        })
        .collect();
    Ok(TauComparison { strategies, ablation })
}
