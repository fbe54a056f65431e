//! Reference integrators.
//!
//! Explicit methods (Euler, RK4, adaptive RKF45), implicit ones (backward
//! Euler and BDF2 with Newton iteration) and a linearly implicit fourth-order
//! Rosenbrock scheme, which is the default label generator. BDF2 starts with
//! one backward-Euler step and then applies the variable-step two-step formula
//!
//! ```text
//! y[n+1] - (1+ω)²/(1+2ω)·y[n] + ω²/(1+2ω)·y[n-1] = h·(1+ω)/(1+2ω)·f(y[n+1])
//! ```
//!
//! with `ω = h[n]/h[n-1]`. In adaptive mode the local error is estimated by
//! comparing the corrector with a Hermite-quadratic predictor.

use std::io::Write;

use crate::dynamics::{eval_jacobian, OdeSystem};
use crate::error::{Error, Result};
use crate::linalg::{Lu, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ExplicitEuler,
    Rk4,
    Rkf45,
    BackwardEuler,
    Bdf2,
    /// Four-stage, fourth-order Rosenbrock method (Shampine's parameters)
    /// with an embedded third-order error estimate.
    Rosenbrock4,
}

impl Method {
    pub fn is_implicit(self) -> bool {
        matches!(self, Method::BackwardEuler | Method::Bdf2 | Method::Rosenbrock4)
    }
}

/// Step-size and tolerance settings for [`integrate`].
///
/// Euler and RK4 always use the fixed step `h_init`; RKF45 is always
/// error-controlled. For the implicit methods `adaptive` selects between a
/// fixed nominal step (halved on Newton failure) and error control.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub method: Method,
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub rtol: f64,
    pub atol: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub adaptive: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::Rosenbrock4,
            h_init: 1e-4,
            h_min: 1e-16,
            h_max: 1e-2,
            rtol: 1e-8,
            atol: 1e-10,
            newton_tol: 1e-10,
            newton_max_iter: 20,
            adaptive: true,
        }
    }
}

impl IntegratorConfig {
    /// Adaptive Rosenbrock with the default tolerances: the label generator.
    pub fn reference() -> Self {
        Self::default()
    }

    /// Fixed-step configuration with `h_min = h_max = h_init = h`.
    pub fn fixed(method: Method, h: f64) -> Self {
        Self {
            method,
            h_init: h,
            h_min: h * 1e-6,
            h_max: h,
            adaptive: false,
            ..Self::default()
        }
    }

    pub fn rkf45(rtol: f64, atol: f64, h_init: f64, h_max: f64) -> Self {
        Self {
            method: Method::Rkf45,
            h_init,
            h_min: 1e-18,
            h_max,
            rtol,
            atol,
            adaptive: true,
            ..Self::default()
        }
    }

    pub fn with_steps(mut self, h_init: f64, h_min: f64, h_max: f64) -> Self {
        self.h_init = h_init;
        self.h_min = h_min;
        self.h_max = h_max;
        self
    }

    pub fn with_tolerances(mut self, rtol: f64, atol: f64) -> Self {
        self.rtol = rtol;
        self.atol = atol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.h_min > 0.0
            && self.h_min <= self.h_init
            && self.h_init <= self.h_max
            && self.rtol > 0.0
            && self.atol > 0.0
            && self.newton_tol > 0.0
            && self.newton_max_iter >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid integrator config {self:?}")))
        }
    }
}

/// Time-ordered states, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    dim: usize,
    times: Vec<f64>,
    states: Vec<f64>,
}

impl Trajectory {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            times: Vec::new(),
            states: Vec::new(),
        }
    }

    /// Appends a sample. Panics if times would not be strictly increasing.
    pub fn push(&mut self, t: f64, x: &[f64]) {
        assert_eq!(x.len(), self.dim);
        if let Some(last) = self.times.last() {
            assert!(t > *last, "trajectory times must increase strictly");
        }
        self.times.push(t);
        self.states.extend_from_slice(x);
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }

    pub fn last_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// Component `j` over time.
    pub fn component(&self, j: usize) -> Vec<f64> {
        self.states().map(|s| s[j]).collect()
    }

    /// Writes `t,x0,...,x{d-1}` CSV at 17 significant digits. Extra
    /// per-row columns can be appended through `extra`.
    pub fn write_csv<W: Write>(
        &self,
        mut w: W,
        extra: Option<(&str, &dyn Fn(usize) -> String)>,
    ) -> Result<()> {
        let mut header = String::from("t");
        for j in 0..self.dim {
            header.push_str(&format!(",x{j}"));
        }
        if let Some((name, _)) = extra {
            header.push(',');
            header.push_str(name);
        }
        writeln!(w, "{header}")?;
        for (i, t) in self.times.iter().enumerate() {
            let mut line = fmt_f64(*t);
            for v in self.state(i) {
                line.push(',');
                line.push_str(&fmt_f64(*v));
            }
            if let Some((_, f)) = extra {
                line.push(',');
                line.push_str(&f(i));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Formats a double with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Integrates from `t0` to `t1`, recording every accepted step.
pub fn integrate(
    sys: &dyn OdeSystem,
    x0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    if !(t1 > t0) {
        return Err(Error::Config(format!("empty interval [{t0}, {t1}]")));
    }
    Solver::new(sys, cfg)?.run(x0, t0, &[t1], true)
}

/// Integrates through the strictly increasing output times `grid` (all after
/// `t0`) and returns the states at exactly those times, plus `(t0, x0)`.
pub fn integrate_grid(
    sys: &dyn OdeSystem,
    x0: &[f64],
    t0: f64,
    grid: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    if grid.is_empty() || grid[0] <= t0 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("output grid must increase strictly after t0".into()));
    }
    Solver::new(sys, cfg)?.run(x0, t0, grid, false)
}

/// State at `t + dt`, without storing the path.
pub fn advance(
    sys: &dyn OdeSystem,
    x: &[f64],
    t: f64,
    dt: f64,
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    let traj = Solver::new(sys, cfg)?.run(x, t, &[t + dt], false)?;
    Ok(traj.last_state().to_vec())
}

/// Label `u = x(t+dt) − x(t)`.
pub fn evolve_delta(
    sys: &dyn OdeSystem,
    x: &[f64],
    t: f64,
    dt: f64,
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>> {
    let end = advance(sys, x, t, dt, cfg)?;
    Ok(end.iter().zip(x).map(|(a, b)| a - b).collect())
}

/// Shampine's A-stable parameter set for the four-stage Rosenbrock scheme.
mod rosenbrock {
    pub const GAMMA: f64 = 0.5;
    pub const A21: f64 = 2.0;
    pub const A31: f64 = 48.0 / 25.0;
    pub const A32: f64 = 6.0 / 25.0;
    pub const C21: f64 = -8.0;
    pub const C31: f64 = 372.0 / 25.0;
    pub const C32: f64 = 12.0 / 5.0;
    pub const C41: f64 = -112.0 / 125.0;
    pub const C42: f64 = -54.0 / 125.0;
    pub const C43: f64 = -2.0 / 5.0;
    pub const B1: f64 = 19.0 / 9.0;
    pub const B2: f64 = 0.5;
    pub const B3: f64 = 25.0 / 108.0;
    pub const B4: f64 = 125.0 / 108.0;
    pub const E1: f64 = 17.0 / 54.0;
    pub const E2: f64 = 7.0 / 36.0;
    pub const E3: f64 = 0.0;
    pub const E4: f64 = 125.0 / 108.0;
    pub const C1X: f64 = 0.5;
    pub const C2X: f64 = -1.5;
    pub const C3X: f64 = 121.0 / 50.0;
    pub const C4X: f64 = 29.0 / 250.0;
    pub const A2X: f64 = 1.0;
    pub const A3X: f64 = 3.0 / 5.0;
}

/// `∂f/∂t`, analytic when the system provides it, zero for autonomous
/// systems, central differences otherwise.
pub fn time_derivative(sys: &dyn OdeSystem, x: &[f64], t: f64) -> Vec<f64> {
    if sys.is_autonomous() {
        return vec![0.0; sys.dim()];
    }
    if let Some(d) = sys.time_derivative(x, t) {
        return d;
    }
    let scale = sys.forcing_period().unwrap_or(1.0).max(t.abs());
    let dt = 1e-7 * scale;
    let n = sys.dim();
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    sys.rhs(x, t + dt, &mut fp);
    sys.rhs(x, t - dt, &mut fm);
    fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * dt)).collect()
}

struct Solver<'a> {
    sys: &'a dyn OdeSystem,
    cfg: IntegratorConfig,
    n: usize,
    // scratch
    f: Vec<f64>,
}

// Fehlberg 4(5) tableau.
const RKF_C: [f64; 6] = [0.0, 0.25, 0.375, 12.0 / 13.0, 1.0, 0.5];
const RKF_A: [[f64; 5]; 6] = [
    [0.0; 5],
    [0.25, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 32.0, 9.0 / 32.0, 0.0, 0.0, 0.0],
    [1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0, 0.0, 0.0],
    [439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0, 0.0],
    [-8.0 / 27.0, 2.0, -3544.0 / 2565.0, 1859.0 / 4104.0, -11.0 / 40.0],
];
const RKF_B5: [f64; 6] = [
    16.0 / 135.0,
    0.0,
    6656.0 / 12825.0,
    28561.0 / 56430.0,
    -9.0 / 50.0,
    2.0 / 55.0,
];
const RKF_B4: [f64; 6] = [
    25.0 / 216.0,
    0.0,
    1408.0 / 2565.0,
    2197.0 / 4104.0,
    -0.2,
    0.0,
];

// BDF2 local errors are held to this fraction of `rtol·|x| + atol` so that
// the accumulated global error stays near the requested tolerance.
const BDF_LOCAL_FRACTION: f64 = 1e-3;

// Relative tolerance for "the step landed on the output time".
const TIME_EPS: f64 = 1e-12;

struct History {
    // previous accepted point and step; None right after start
    prev: Option<(Vec<f64>, f64)>,
}

enum StepOutcome {
    Accepted { x: Vec<f64>, h_next: f64 },
    Rejected { h_next: f64 },
}

impl<'a> Solver<'a> {
    fn new(sys: &'a dyn OdeSystem, cfg: &IntegratorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            sys,
            cfg: *cfg,
            n: sys.dim(),
            f: vec![0.0; sys.dim()],
        })
    }

    fn rhs(&mut self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.sys.rhs(x, t, &mut self.f);
        if self.f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Overflow(format!("{}: rhs non-finite at t = {t:e}", self.sys.name())));
        }
        Ok(self.f.clone())
    }

    fn run(&mut self, x0: &[f64], t0: f64, outputs: &[f64], record_all: bool) -> Result<Trajectory> {
        if x0.len() != self.n {
            return Err(Error::Dimension {
                expected: self.n,
                got: x0.len(),
            });
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Overflow("initial state is not finite".into()));
        }
        let mut traj = Trajectory::new(self.n);
        traj.push(t0, x0);
        let mut x = x0.to_vec();
        let mut t = t0;
        let mut h = self.cfg.h_init;
        let mut hist = History { prev: None };
        let fixed = !self.cfg.adaptive && self.cfg.method != Method::Rkf45
            || matches!(self.cfg.method, Method::ExplicitEuler | Method::Rk4);

        for &target in outputs {
            let span = (target - t0).abs().max(1.0) * TIME_EPS;
            while target - t > span {
                let remaining = target - t;
                let mut h_try = h.min(self.cfg.h_max);
                let last = h_try >= remaining - span;
                if last {
                    h_try = remaining;
                } else if remaining < 2.0 * h_try && !fixed {
                    // split evenly rather than leave a sliver for the last step
                    h_try = 0.5 * remaining;
                }
                match self.step(&x, t, h_try, &mut hist, fixed)? {
                    StepOutcome::Accepted { x: x_new, h_next } => {
                        if x_new.iter().any(|v| !v.is_finite()) {
                            return Err(Error::Overflow(format!(
                                "{}: state non-finite at t = {:e}",
                                self.sys.name(),
                                t + h_try
                            )));
                        }
                        let t_new = if last { target } else { t + h_try };
                        hist.prev = Some((std::mem::replace(&mut x, x_new), h_try));
                        t = t_new;
                        if record_all && t < target {
                            traj.push(t, &x);
                        }
                        // a shortened final step must not shrink the next one
                        if !(last && h_next <= h) {
                            h = h_next;
                        }
                    }
                    StepOutcome::Rejected { h_next } => {
                        if h_next < self.cfg.h_min {
                            return Err(if self.cfg.method.is_implicit() && fixed {
                                Error::StiffFailure { t, h: h_try }
                            } else {
                                Error::StepSize { t, h: h_next }
                            });
                        }
                        h = h_next;
                    }
                }
            }
            traj.push(target, &x);
        }
        Ok(traj)
    }

    fn step(
        &mut self,
        x: &[f64],
        t: f64,
        h: f64,
        hist: &mut History,
        fixed: bool,
    ) -> Result<StepOutcome> {
        match self.cfg.method {
            Method::ExplicitEuler => {
                let f = self.rhs(x, t)?;
                let x_new = x.iter().zip(&f).map(|(a, b)| a + h * b).collect();
                Ok(StepOutcome::Accepted { x: x_new, h_next: self.cfg.h_init })
            }
            Method::Rk4 => {
                let x_new = self.rk4(x, t, h)?;
                Ok(StepOutcome::Accepted { x: x_new, h_next: self.cfg.h_init })
            }
            Method::Rkf45 => self.rkf45(x, t, h),
            Method::Rosenbrock4 => self.rosenbrock(x, t, h, fixed),
            Method::BackwardEuler => self.implicit(x, t, h, None, fixed),
            Method::Bdf2 => {
                // restart from backward Euler when the step ratio is too large
                // for the variable-step formula to stay zero-stable
                let prev = hist
                    .prev
                    .as_ref()
                    .filter(|(_, hp)| h / hp <= 2.5)
                    .map(|(xp, hp)| (xp.clone(), *hp));
                self.implicit(x, t, h, prev, fixed)
            }
        }
    }

    fn rk4(&mut self, x: &[f64], t: f64, h: f64) -> Result<Vec<f64>> {
        let k1 = self.rhs(x, t)?;
        let tmp: Vec<f64> = x.iter().zip(&k1).map(|(a, k)| a + 0.5 * h * k).collect();
        let k2 = self.rhs(&tmp, t + 0.5 * h)?;
        let tmp: Vec<f64> = x.iter().zip(&k2).map(|(a, k)| a + 0.5 * h * k).collect();
        let k3 = self.rhs(&tmp, t + 0.5 * h)?;
        let tmp: Vec<f64> = x.iter().zip(&k3).map(|(a, k)| a + h * k).collect();
        let k4 = self.rhs(&tmp, t + h)?;
        Ok((0..self.n)
            .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect())
    }

    fn rkf45(&mut self, x: &[f64], t: f64, h: f64) -> Result<StepOutcome> {
        let n = self.n;
        let mut k: Vec<Vec<f64>> = Vec::with_capacity(6);
        let mut tmp = vec![0.0; n];
        for s in 0..6 {
            for i in 0..n {
                let mut acc = x[i];
                for (j, kj) in k.iter().enumerate() {
                    acc += h * RKF_A[s][j] * kj[i];
                }
                tmp[i] = acc;
            }
            self.sys.rhs(&tmp, t + RKF_C[s] * h, &mut self.f);
            k.push(self.f.clone());
        }
        let mut x5 = vec![0.0; n];
        let mut err = 0.0f64;
        for i in 0..n {
            let mut y5 = x[i];
            let mut y4 = x[i];
            for s in 0..6 {
                y5 += h * RKF_B5[s] * k[s][i];
                y4 += h * RKF_B4[s] * k[s][i];
            }
            x5[i] = y5;
            let scale = self.cfg.atol + self.cfg.rtol * x[i].abs().max(y5.abs());
            err = err.max((y5 - y4).abs() / scale);
        }
        if !err.is_finite() {
            return Ok(StepOutcome::Rejected { h_next: h * 0.1 });
        }
        let factor = if err == 0.0 {
            5.0
        } else {
            (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
        };
        let h_next = (h * factor).min(self.cfg.h_max);
        if err <= 1.0 {
            Ok(StepOutcome::Accepted { x: x5, h_next })
        } else {
            Ok(StepOutcome::Rejected { h_next })
        }
    }

    /// One backward-Euler (no history) or BDF2 step.
    fn implicit(
        &mut self,
        x: &[f64],
        t: f64,
        h: f64,
        prev: Option<(Vec<f64>, f64)>,
        fixed: bool,
    ) -> Result<StepOutcome> {
        let n = self.n;
        let t_new = t + h;
        let f_n = self.rhs(x, t)?;

        // y[n+1] = base + beta·h·f(y[n+1]); predictor + its error weight
        let (base, beta, predictor, err_const) = match &prev {
            None => {
                let pred: Vec<f64> = (0..n).map(|i| x[i] + h * f_n[i]).collect();
                (x.to_vec(), 1.0, pred, 0.5)
            }
            Some((x_prev, h_prev)) => {
                let w = h / h_prev;
                let a1 = (1.0 + w).powi(2) / (1.0 + 2.0 * w);
                let a2 = w * w / (1.0 + 2.0 * w);
                let beta = (1.0 + w) / (1.0 + 2.0 * w);
                let base: Vec<f64> = (0..n).map(|i| a1 * x[i] - a2 * x_prev[i]).collect();
                // Hermite quadratic through (t-h_prev, x_prev), (t, x) with slope f_n
                let pred: Vec<f64> = (0..n)
                    .map(|i| {
                        let c = (x_prev[i] - x[i] + h_prev * f_n[i]) / (h_prev * h_prev);
                        x[i] + h * f_n[i] + c * h * h
                    })
                    .collect();
                let p = h * h * (h + h_prev) / 6.0;
                let c = h * h * (h + h_prev).powi(2) / (6.0 * (2.0 * h + h_prev));
                (base, beta, pred, c / (p + c))
            }
        };

        let (corrected, lu) = match self.newton(&base, beta * h, t_new, &predictor)? {
            Some(sol) => sol,
            None => {
                return Ok(StepOutcome::Rejected { h_next: 0.5 * h });
            }
        };

        if fixed {
            let h_next = (2.0 * h).min(self.cfg.h_init);
            return Ok(StepOutcome::Accepted {
                x: corrected,
                h_next,
            });
        }

        // Filter the raw estimate through (I - βhJ)⁻¹ so stiff components,
        // whose predictor is polluted by h·f(y[n]), do not dominate it.
        let mut lte: Vec<f64> = (0..n)
            .map(|i| err_const * (corrected[i] - predictor[i]))
            .collect();
        lu.solve_in_place(&mut lte);
        let mut err = 0.0f64;
        for i in 0..n {
            let lte = lte[i].abs();
            let scale = BDF_LOCAL_FRACTION
                * (self.cfg.atol + self.cfg.rtol * x[i].abs().max(corrected[i].abs()));
            err = err.max(lte / scale);
        }
        let order = if prev.is_none() { 1.0 } else { 2.0 };
        let factor = if err == 0.0 {
            2.0
        } else {
            (0.9 * err.powf(-1.0 / (order + 1.0))).clamp(0.2, 2.0)
        };
        let h_next = (h * factor).min(self.cfg.h_max);
        if err <= 1.0 {
            Ok(StepOutcome::Accepted {
                x: corrected,
                h_next,
            })
        } else {
            Ok(StepOutcome::Rejected { h_next })
        }
    }

    fn rosenbrock(&mut self, x: &[f64], t: f64, h: f64, fixed: bool) -> Result<StepOutcome> {
        use rosenbrock::*;
        let n = self.n;
        let f0 = self.rhs(x, t)?;
        let jac = eval_jacobian(self.sys, x, t)?;
        let dfdt = time_derivative(self.sys, x, t);
        let mut m = jac.scaled(-1.0);
        for i in 0..n {
            m[(i, i)] += 1.0 / (GAMMA * h);
        }
        let lu = match Lu::factor(&m) {
            Ok(lu) => lu,
            Err(_) => return Ok(StepOutcome::Rejected { h_next: 0.5 * h }),
        };
        let mut g1: Vec<f64> = (0..n).map(|i| f0[i] + h * C1X * dfdt[i]).collect();
        lu.solve_in_place(&mut g1);
        let y: Vec<f64> = (0..n).map(|i| x[i] + A21 * g1[i]).collect();
        self.sys.rhs(&y, t + A2X * h, &mut self.f);
        let mut g2: Vec<f64> = (0..n)
            .map(|i| self.f[i] + h * C2X * dfdt[i] + C21 * g1[i] / h)
            .collect();
        lu.solve_in_place(&mut g2);
        let y: Vec<f64> = (0..n).map(|i| x[i] + A31 * g1[i] + A32 * g2[i]).collect();
        self.sys.rhs(&y, t + A3X * h, &mut self.f);
        let mut g3: Vec<f64> = (0..n)
            .map(|i| self.f[i] + h * C3X * dfdt[i] + (C31 * g1[i] + C32 * g2[i]) / h)
            .collect();
        lu.solve_in_place(&mut g3);
        // the fourth stage reuses the third function evaluation
        let mut g4: Vec<f64> = (0..n)
            .map(|i| {
                self.f[i] + h * C4X * dfdt[i] + (C41 * g1[i] + C42 * g2[i] + C43 * g3[i]) / h
            })
            .collect();
        lu.solve_in_place(&mut g4);
        let mut x_new = vec![0.0; n];
        let mut err = 0.0f64;
        for i in 0..n {
            x_new[i] = x[i] + B1 * g1[i] + B2 * g2[i] + B3 * g3[i] + B4 * g4[i];
            let e = E1 * g1[i] + E2 * g2[i] + E3 * g3[i] + E4 * g4[i];
            let scale = self.cfg.atol + self.cfg.rtol * x[i].abs().max(x_new[i].abs());
            err = err.max(e.abs() / scale);
        }
        if !err.is_finite() || x_new.iter().any(|v| !v.is_finite()) {
            return Ok(StepOutcome::Rejected { h_next: 0.25 * h });
        }
        if fixed {
            return Ok(StepOutcome::Accepted {
                x: x_new,
                h_next: self.cfg.h_init,
            });
        }
        let factor = if err == 0.0 {
            4.0
        } else if err <= 1.0 {
            (0.9 * err.powf(-0.25)).clamp(0.2, 4.0)
        } else {
            (0.9 * err.powf(-1.0 / 3.0)).clamp(0.1, 0.9)
        };
        let h_next = (h * factor).min(self.cfg.h_max);
        if err <= 1.0 {
            Ok(StepOutcome::Accepted { x: x_new, h_next })
        } else {
            Ok(StepOutcome::Rejected { h_next })
        }
    }

    /// Solves `y = base + gamma·f(y, t)` by Newton iteration with the
    /// Jacobian refreshed every iteration. `None` on non-convergence.
    fn newton(
        &mut self,
        base: &[f64],
        gamma: f64,
        t: f64,
        guess: &[f64],
    ) -> Result<Option<(Vec<f64>, Lu)>> {
        let n = self.n;
        let mut y = guess.to_vec();
        for _ in 0..self.cfg.newton_max_iter {
            self.sys.rhs(&y, t, &mut self.f);
            if self.f.iter().any(|v| !v.is_finite()) {
                return Ok(None);
            }
            let mut resid: Vec<f64> = (0..n).map(|i| base[i] + gamma * self.f[i] - y[i]).collect();
            let jac = match eval_jacobian(self.sys, &y, t) {
                Ok(j) => j,
                Err(_) => return Ok(None),
            };
            let mut m = Matrix::identity(n);
            for i in 0..n {
                for j in 0..n {
                    m[(i, j)] -= gamma * jac[(i, j)];
                }
            }
            let lu = match Lu::factor(&m) {
                Ok(lu) => lu,
                Err(_) => return Ok(None),
            };
            lu.solve_in_place(&mut resid);
            let mut converged = true;
            for i in 0..n {
                y[i] += resid[i];
                if !y[i].is_finite() {
                    return Ok(None);
                }
                if resid[i].abs() > self.cfg.atol + self.cfg.newton_tol * y[i].abs() {
                    converged = false;
                }
            }
            if converged {
                return Ok(Some((y, lu)));
            }
        }
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{LotkaVolterra, StateDomain, SystemSpec};

    fn decay(lambda: f64) -> SystemSpec {
        SystemSpec::new("decay", StateDomain::linear(vec![(0.0, 1.0)]), true, move |x, _t, out| {
            out[0] = lambda * x[0]
        })
        .with_jacobian(move |_x, _t| Matrix::from_rows(&[&[lambda]]))
    }

    #[test]
    fn rk4_matches_exponential() {
        let sys = decay(-1.0);
        let traj = integrate(&sys, &[1.0], 0.0, 1.0, &IntegratorConfig::fixed(Method::Rk4, 1e-3)).unwrap();
        assert_eq!(*traj.times().last().unwrap(), 1.0);
        assert!((traj.last_state()[0] - (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn backward_euler_stable_explicit_euler_diverges() {
        let sys = decay(-1000.0);
        let be = integrate(&sys, &[1.0], 0.0, 1.0, &IntegratorConfig::fixed(Method::BackwardEuler, 0.01)).unwrap();
        let ys = be.component(0);
        assert!(ys.windows(2).all(|w| w[1] < w[0]));
        assert!(ys.last().unwrap().abs() < 1e-10);

        let fe = integrate(&sys, &[1.0], 0.0, 1.0, &IntegratorConfig::fixed(Method::ExplicitEuler, 0.01));
        match fe {
            Ok(traj) => assert!(traj.last_state()[0].abs() > 1e50),
            Err(Error::Overflow(_)) => {}
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn empty_interval_rejected() {
        let sys = decay(-1.0);
        assert!(integrate(&sys, &[1.0], 0.0, 0.0, &IntegratorConfig::default()).is_err());
    }

    #[test]
    fn evolve_delta_matches_analytic() {
        let sys = decay(-1.0);
        let u = evolve_delta(&sys, &[1.0], 0.0, 0.5, &IntegratorConfig::reference()).unwrap();
        assert!((u[0] - ((-0.5f64).exp() - 1.0)).abs() < 1e-8, "{}", u[0]);
    }

    #[test]
    fn equilibrium_has_zero_delta() {
        let lv = LotkaVolterra::new();
        let u = evolve_delta(&lv, &[2.0, 1.0], 0.0, 0.3, &IntegratorConfig::reference()).unwrap();
        assert!(u.iter().all(|v| v.abs() <= 1e-10));
    }

    fn global_error(method: Method, h: f64) -> f64 {
        let sys = decay(-1.0);
        let traj = integrate(&sys, &[1.0], 0.0, 1.0, &IntegratorConfig::fixed(method, h)).unwrap();
        (traj.last_state()[0] - (-1.0f64).exp()).abs()
    }

    #[test]
    fn convergence_orders() {
        for (method, nominal, h) in [
            (Method::ExplicitEuler, 1.0, 1e-3),
            (Method::BackwardEuler, 1.0, 1e-3),
            (Method::Rk4, 4.0, 1e-2),
            (Method::Bdf2, 2.0, 1e-3),
            (Method::Rosenbrock4, 4.0, 2e-2),
        ] {
            let order = (global_error(method, h) / global_error(method, h / 2.0)).log2();
            assert!((order - nominal).abs() < 0.3, "{method:?}: order {order}");
        }
    }

    #[test]
    fn rosenbrock_fourth_order_with_forcing() {
        // y' = cos(t) y, y(0) = 1  =>  y = exp(sin t)
        let sys = SystemSpec::new("forced", StateDomain::linear(vec![(0.0, 3.0)]), false, |x, t, out| {
            out[0] = t.cos() * x[0]
        });
        let err = |h: f64| {
            let cfg = IntegratorConfig::fixed(Method::Rosenbrock4, h);
            let y = advance(&sys, &[1.0], 0.0, 2.0, &cfg).unwrap()[0];
            (y - 2.0f64.sin().exp()).abs()
        };
        let order = (err(0.05) / err(0.025)).log2();
        assert!((order - 4.0).abs() < 0.4, "order {order}");
    }

    #[test]
    fn rosenbrock_handles_stiff_decay() {
        let sys = decay(-1e6);
        let cfg = IntegratorConfig::fixed(Method::Rosenbrock4, 0.1);
        let y = advance(&sys, &[1.0], 0.0, 1.0, &cfg).unwrap()[0];
        assert!(y.abs() < 1e-3);
        let adaptive = IntegratorConfig { method: Method::Rosenbrock4, ..IntegratorConfig::reference() };
        let y = advance(&LotkaVolterra::new(), &[3.0, 2.0], 0.0, 2.0, &adaptive).unwrap();
        let tight = advance(&LotkaVolterra::new(), &[3.0, 2.0], 0.0, 2.0, &IntegratorConfig::rkf45(1e-12, 1e-14, 1e-3, 0.1)).unwrap();
        for j in 0..2 {
            assert!((y[j] - tight[j]).abs() < 1e-6 * tight[j].abs());
        }
    }

    #[test]
    fn backward_euler_a_stable() {
        for &h in &[1e-3, 0.1, 1.0, 100.0] {
            for &lambda in &[-0.1, -10.0, -1e6] {
                let sys = decay(lambda);
                let traj = integrate(&sys, &[1.0], 0.0, 10.0 * h, &IntegratorConfig::fixed(Method::BackwardEuler, h)).unwrap();
                let ys = traj.component(0);
                assert!(ys.windows(2).all(|w| w[1].abs() <= w[0].abs()));
            }
        }
    }

    #[test]
    fn grid_output_hits_requested_times() {
        let lv = LotkaVolterra::new();
        let grid = [0.1, 0.2, 0.35];
        let traj = integrate_grid(&lv, &[3.0, 2.0], 0.0, &grid, &IntegratorConfig::reference()).unwrap();
        assert_eq!(traj.times(), &[0.0, 0.1, 0.2, 0.35]);
        let direct = advance(&lv, &[3.0, 2.0], 0.0, 0.35, &IntegratorConfig::reference()).unwrap();
        for (a, b) in traj.last_state().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn rkf45_meets_tolerance() {
        let lv = LotkaVolterra::new();
        let tight = advance(&lv, &[3.0, 2.0], 0.0, 2.0, &IntegratorConfig::rkf45(1e-12, 1e-14, 1e-3, 0.1)).unwrap();
        let loose = advance(&lv, &[3.0, 2.0], 0.0, 2.0, &IntegratorConfig::rkf45(1e-6, 1e-8, 1e-3, 0.1)).unwrap();
        let bdf = advance(&lv, &[3.0, 2.0], 0.0, 2.0, &IntegratorConfig::reference()).unwrap();
        for j in 0..2 {
            assert!((tight[j] - loose[j]).abs() < 1e-4);
            assert!((tight[j] - bdf[j]).abs() < 1e-6, "{} vs {}", tight[j], bdf[j]);
        }
    }

    #[test]
    fn csv_has_header_and_full_precision() {
        let mut traj = Trajectory::new(2);
        traj.push(0.0, &[1.0 / 3.0, 2.0]);
        let mut buf = Vec::new();
        traj.write_csv(&mut buf, None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,x0,x1");
        let row: Vec<f64> = lines.next().unwrap().split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(row[1], 1.0 / 3.0);
    }
}
