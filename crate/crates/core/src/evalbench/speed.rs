//! Wall-clock cost of one `Δt` advance: surrogate against integrator.

use std::time::Instant;

use crate::dynamics::OdeSystem;
use crate::error::{Error, Result};
use crate::integrate::{advance, IntegratorConfig};
use crate::surrogate::MlpModel;

use super::metrics::median;

/// Shortest timed sample; shorter workloads are repeated inside one sample.
pub const MIN_SAMPLE_SECONDS: f64 = 2e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedConfig {
    pub repetitions: usize,
    pub warmup: usize,
}

impl Default for SpeedConfig {
    fn default() -> Self {
        Self {
            repetitions: 20,
            warmup: 3,
        }
    }
}

/// Per-state, per-`Δt` medians in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Speedup {
    pub surrogate_step_s: f64,
    pub integrator_step_s: f64,
    pub speedup: f64,
    pub n_states: usize,
    pub repetitions: usize,
    pub warmup: usize,
}

/// Median seconds per call of `f` over `reps` samples, each sample long
/// enough for the timer.
pub fn time_median<F: FnMut() -> Result<()>>(mut f: F, reps: usize, warmup: usize) -> Result<f64> {
    for _ in 0..warmup {
        f()?;
    }
    let start = Instant::now();
    f()?;
    let one = start.elapsed().as_secs_f64();
    let inner = if one >= MIN_SAMPLE_SECONDS {
        1
    } else {
        ((MIN_SAMPLE_SECONDS / one.max(1e-9)).ceil() as usize).min(1_000_000)
    };
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        for _ in 0..inner {
            f()?;
        }
        samples.push(start.elapsed().as_secs_f64() / inner as f64);
    }
    Ok(median(&samples))
}

/// Times a batched surrogate advance of `states` against advancing each state
/// with `cfg` over the model step. States are `(x, t)` pairs.
pub fn measure_speedup(
    model: &MlpModel,
    sys: &dyn OdeSystem,
    cfg: &IntegratorConfig,
    states: &[(Vec<f64>, f64)],
    speed: &SpeedConfig,
) -> Result<Speedup> {
    if states.is_empty() {
        return Err(Error::Config("speed measurement needs at least one state".into()));
    }
    if speed.repetitions < 20 {
        return Err(Error::Config("at least 20 timing repetitions are required".into()));
    }
    let n = states.len();
    let inputs: Vec<f64> = states.iter().flat_map(|(x, t)| model.input_for(x, *t)).collect();
    let surrogate = time_median(
        || {
            let u = model.forward_batch(&inputs)?;
            std::hint::black_box(u);
            Ok(())
        },
        speed.repetitions,
        speed.warmup,
    )?;
    let integrator = time_median(
        || {
            for (x, t) in states {
                std::hint::black_box(advance(sys, x, *t, model.dt, cfg)?);
            }
            Ok(())
        },
        speed.repetitions,
        speed.warmup,
    )?;
    let (s, i) = (surrogate / n as f64, integrator / n as f64);
    Ok(Speedup {
        surrogate_step_s: s,
        integrator_step_s: i,
        speedup: i / s,
        n_states: n,
        repetitions: speed.repetitions,
        warmup: speed.warmup,
    })
}
