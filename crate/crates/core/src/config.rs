//! Run configuration files and the named presets.
//!
//! A run configuration is TOML. Top-level keys describe the experiment
//! ([`ExperimentConfig`]); the optional `[csp_hist]`, `[bench]`, `[compare]`
//! and `[hybrid]` tables configure the matching CLI subcommands.

use serde::{Deserialize, Serialize};

use crate::csp::{CspConfig, LogBins, TimeMode};
use crate::emcs::TauSchedule;
use crate::error::{Error, Result};
use crate::evalbench::{ExperimentConfig, SamplingMethod};
use crate::integrate::IntegratorConfig;

const LV_PRESET: &str = include_str!("../presets/lotka_volterra.toml");
const MODULATOR_PRESET: &str = include_str!("../presets/ring_modulator.toml");

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 2] = ["lotka_volterra", "ring_modulator"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogBinsSpec {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Default for LogBinsSpec {
    fn default() -> Self {
        let b = LogBins::default();
        Self { lo: b.lo, hi: b.hi, n: b.n }
    }
}

impl From<LogBinsSpec> for LogBins {
    fn from(s: LogBinsSpec) -> Self {
        LogBins { lo: s.lo, hi: s.hi, n: s.n }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeModeSpec {
    Csp,
    LambdaMax,
}

impl From<TimeModeSpec> for TimeMode {
    fn from(m: TimeModeSpec) -> Self {
        match m {
            TimeModeSpec::Csp => TimeMode::Csp,
            TimeModeSpec::LambdaMax => TimeMode::LambdaMax,
        }
    }
}

/// Characteristic-time histograms per EMCS step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CspHistSpec {
    /// Monte Carlo roots, drawn in the system domain without filtering.
    pub n_roots: usize,
    pub tau: TauSchedule,
    pub mode: TimeModeSpec,
    pub bins: LogBinsSpec,
    pub csp: CspConfig,
}

impl Default for CspHistSpec {
    fn default() -> Self {
        Self {
            n_roots: 2000,
            tau: TauSchedule::fixed(0.5, 20),
            mode: TimeModeSpec::LambdaMax,
            bins: LogBinsSpec::default(),
            csp: CspConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSpec {
    pub n_states: usize,
    pub repetitions: usize,
    pub warmup: usize,
    /// Implicit integrator timed against the surrogate.
    pub integrator: IntegratorConfig,
    /// The asserted lower bound on the speedup.
    pub min_speedup: f64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            n_states: 1,
            repetitions: 20,
            warmup: 3,
            integrator: IntegratorConfig::reference(),
            min_speedup: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedSchedule {
    pub name: String,
    pub tau: TauSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareSpec {
    pub seeds: Vec<u64>,
    pub methods: Vec<SamplingMethod>,
    /// EMCS schedule for the sampling comparison; the experiment's when absent.
    pub emcs_tau: Option<TauSchedule>,
    /// Step counts of the τ ablation.
    pub ks: Vec<usize>,
    /// Full-length increasing schedule used by the ablation.
    pub increasing: TauSchedule,
    pub schedules: Vec<NamedSchedule>,
}

impl Default for CompareSpec {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            methods: vec![SamplingMethod::Emcs, SamplingMethod::Mc, SamplingMethod::Manifold],
            emcs_tau: None,
            ks: vec![0, 2, 5, 10],
            increasing: TauSchedule::none(),
            schedules: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HybridSpec {
    pub threshold: f64,
    /// Integrator used on fallback steps.
    pub integrator: IntegratorConfig,
}

impl Default for HybridSpec {
    fn default() -> Self {
        Self {
            threshold: crate::indicator::DEFAULT_THRESHOLD,
            integrator: IntegratorConfig::reference(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
    pub csp_hist: CspHistSpec,
    pub bench: BenchSpec,
    pub compare: CompareSpec,
    pub hybrid: HybridSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::default(),
            csp_hist: CspHistSpec::default(),
            bench: BenchSpec::default(),
            compare: CompareSpec::default(),
            hybrid: HybridSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("bad run config: {e}")))?;
        cfg.experiment.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    /// Applies a seed to every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.experiment.seed = seed;
        self
    }
}

/// Built-in configuration by name.
pub fn preset(name: &str) -> Result<RunConfig> {
    match name {
        "lotka_volterra" | "lv" => RunConfig::from_toml(LV_PRESET),
        "ring_modulator" | "modulator" => RunConfig::from_toml(MODULATOR_PRESET),
        other => Err(Error::Config(format!(
            "unknown preset {other:?}; available: {}",
            PRESETS.join(", ")
        ))),
    }
}

/// Raw TOML text of a built-in preset.
pub fn preset_text(name: &str) -> Result<&'static str> {
    match name {
        "lotka_volterra" | "lv" => Ok(LV_PRESET),
        "ring_modulator" | "modulator" => Ok(MODULATOR_PRESET),
        other => Err(Error::Config(format!("unknown preset {other:?}"))),
    }
}
