//! Neural surrogate `F_θ` for the large-step propagator.
//!
//! A model maps the current state (plus the time within the forcing period
//! for non-autonomous systems) to the state change over its step `dt`.
//! [`rollout`] applies it autoregressively, `x ← x + F_θ(x[, t])`.

pub mod io;
pub mod mlp;
pub mod preprocess;
pub mod train;

pub use io::{load_model, read_model, save_model, write_model};
pub use mlp::{gelu, gelu_derivative, Mlp, Workspace};
pub use preprocess::{box_cox, inverse_box_cox, Preprocessor};
pub use train::{train, Adam, History, TrainConfig};

use crate::dynamics::OdeSystem;
use crate::error::{Error, Result};
use crate::integrate::Trajectory;

/// Relative tolerance when comparing a requested step with the model's.
pub const DT_MATCH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub mlp: Mlp,
    pub pre: Preprocessor,
    pub dt: f64,
    pub autonomous: bool,
    pub system_name: String,
    /// Period used to reduce the time feature; `None` keeps `t` as is.
    pub forcing_period: Option<f64>,
    pub train_seed: u64,
}

/// Scratch buffers for repeated single-state inference.
#[derive(Debug, Clone, Default)]
pub struct ForwardBuffers {
    z: Vec<f64>,
    out: Vec<f64>,
    ws: Workspace,
}

impl MlpModel {
    pub fn new(mlp: Mlp, pre: Preprocessor, dt: f64, autonomous: bool, train_seed: u64) -> Result<Self> {
        if pre.in_dim() != mlp.in_dim() || pre.out_dim() != mlp.out_dim() {
            return Err(Error::Dimension {
                expected: mlp.in_dim(),
                got: pre.in_dim(),
            });
        }
        let state_dim = mlp.in_dim() - usize::from(!autonomous);
        if state_dim != mlp.out_dim() {
            return Err(Error::Dimension {
                expected: state_dim,
                got: mlp.out_dim(),
            });
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("invalid model dt {dt}")));
        }
        Ok(Self {
            mlp,
            pre,
            dt,
            autonomous,
            system_name: String::new(),
            forcing_period: None,
            train_seed,
        })
    }

    /// Records the system name and forcing period.
    pub fn with_system(mut self, sys: &dyn OdeSystem) -> Result<Self> {
        if sys.dim() != self.dim() || sys.is_autonomous() != self.autonomous {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: sys.dim(),
            });
        }
        self.system_name = sys.name().to_string();
        self.forcing_period = sys.forcing_period();
        Ok(self)
    }

    /// State dimension.
    pub fn dim(&self) -> usize {
        self.mlp.out_dim()
    }

    pub fn in_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    /// Raw network input for state `x` at time `t`.
    pub fn input_for(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut v = x.to_vec();
        if !self.autonomous {
            v.push(self.time_feature(t));
        }
        v
    }

    pub fn time_feature(&self, t: f64) -> f64 {
        match self.forcing_period {
            Some(p) => t.rem_euclid(p),
            None => t,
        }
    }

    /// Predicted label for a raw input row.
    pub fn forward(&self, raw_input: &[f64]) -> Result<Vec<f64>> {
        let mut buf = ForwardBuffers::default();
        self.forward_buffered(raw_input, &mut buf).map(|u| u.to_vec())
    }

    /// As [`MlpModel::forward`], reusing `buf`.
    pub fn forward_buffered<'a>(&self, raw_input: &[f64], buf: &'a mut ForwardBuffers) -> Result<&'a [f64]> {
        let (i, o) = (self.in_dim(), self.dim());
        buf.z.resize(i, 0.0);
        buf.out.resize(o, 0.0);
        self.pre.transform_input_into(raw_input, &mut buf.z)?;
        let mut net = vec![0.0; o];
        self.mlp.forward_row(&buf.z, &mut net, &mut buf.ws);
        self.pre.inverse_label_into(&net, &mut buf.out);
        if buf.out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Inference("non-finite network output".into()));
        }
        Ok(&buf.out)
    }

    /// Row-major batch of raw inputs; bit-identical to per-row [`MlpModel::forward`].
    pub fn forward_batch(&self, raw_inputs: &[f64]) -> Result<Vec<f64>> {
        if raw_inputs.len() % self.in_dim() != 0 {
            return Err(Error::Dimension {
                expected: self.in_dim(),
                got: raw_inputs.len() % self.in_dim(),
            });
        }
        let mut buf = ForwardBuffers::default();
        let mut out = Vec::with_capacity(raw_inputs.len() / self.in_dim() * self.dim());
        for row in raw_inputs.chunks(self.in_dim()) {
            out.extend_from_slice(self.forward_buffered(row, &mut buf)?);
        }
        Ok(out)
    }

    pub fn check_dt(&self, requested: f64) -> Result<()> {
        if (requested - self.dt).abs() > DT_MATCH_TOL * self.dt {
            return Err(Error::DtMismatch {
                model: self.dt,
                requested,
            });
        }
        Ok(())
    }
}

/// Autoregressive prediction.
#[derive(Debug, Clone)]
pub struct Rollout {
    /// `x0` followed by one state per completed step.
    pub trajectory: Trajectory,
    /// Step at which the state became non-finite, if any.
    pub truncated_at: Option<usize>,
}

/// `n_steps` surrogate steps from `(x0, t0)`.
pub fn rollout(model: &MlpModel, x0: &[f64], t0: f64, n_steps: usize) -> Result<Rollout> {
    if n_steps == 0 {
        return Err(Error::Config("rollout needs at least one step".into()));
    }
    if x0.len() != model.dim() {
        return Err(Error::Dimension {
            expected: model.dim(),
            got: x0.len(),
        });
    }
    let mut traj = Trajectory::new(model.dim());
    traj.push(t0, x0);
    let mut x = x0.to_vec();
    let mut buf = ForwardBuffers::default();
    let mut input = Vec::with_capacity(model.in_dim());
    for j in 0..n_steps {
        let t = t0 + j as f64 * model.dt;
        input.clear();
        input.extend_from_slice(&x);
        if !model.autonomous {
            input.push(model.time_feature(t));
        }
        let next = match model.forward_buffered(&input, &mut buf) {
            Ok(u) => x.iter().zip(u).map(|(a, b)| a + b).collect::<Vec<f64>>(),
            Err(Error::Inference(_)) => {
                return Ok(Rollout {
                    trajectory: traj,
                    truncated_at: Some(j),
                })
            }
            Err(e) => return Err(e),
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Ok(Rollout {
                trajectory: traj,
                truncated_at: Some(j),
            });
        }
        x = next;
        traj.push(t0 + (j + 1) as f64 * model.dt, &x);
    }
    Ok(Rollout {
        trajectory: traj,
        truncated_at: None,
    })
}

/// [`rollout`] after checking that `dt` matches the model's step.
pub fn rollout_with_dt(model: &MlpModel, dt: f64, x0: &[f64], t0: f64, n_steps: usize) -> Result<Rollout> {
    model.check_dt(dt)?;
    rollout(model, x0, t0, n_steps)
}
