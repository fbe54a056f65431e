//! ODE systems `dx/dt = f(x, t)`.
//!
//! Every system implements [`OdeSystem`]. Two concrete systems ship with the
//! crate: the 2-D [`LotkaVolterra`] predator-prey model and the 15-D
//! non-autonomous [`RingModulator`] circuit. New systems are added in code,
//! either by implementing the trait or by wrapping closures in a
//! [`SystemSpec`], and made available by name through a [`SystemRegistry`].

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Relative finite-difference step for numerical Jacobians.
pub const FD_EPS_REL: f64 = 1e-6;
/// Absolute floor of the finite-difference step.
pub const FD_EPS_ABS: f64 = 1e-9;

/// Sampling domain of a system: per-dimension bounds and scale flags.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDomain {
    pub bounds: Vec<(f64, f64)>,
    /// Sample dimension `i` uniformly in log space when set.
    pub log_scale: Vec<bool>,
}

impl StateDomain {
    pub fn linear(bounds: Vec<(f64, f64)>) -> Self {
        let n = bounds.len();
        Self {
            bounds,
            log_scale: vec![false; n],
        }
    }

    pub fn lower(&self) -> Vec<f64> {
        self.bounds.iter().map(|b| b.0).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.bounds.iter().map(|b| b.1).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.bounds)
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }
}

/// A (possibly non-autonomous) ODE right-hand side with domain metadata.
pub trait OdeSystem: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    /// `false` when `f` depends explicitly on `t`.
    fn is_autonomous(&self) -> bool;

    /// Writes `f(x, t)` into `out`. Both slices have length `dim()`.
    fn rhs(&self, x: &[f64], t: f64, out: &mut [f64]);

    /// Analytic Jacobian `∂f/∂x`, when the system provides one.
    fn jacobian(&self, _x: &[f64], _t: f64) -> Option<Matrix> {
        None
    }

    /// Analytic `∂f/∂t`, for non-autonomous systems that provide one.
    fn time_derivative(&self, _x: &[f64], _t: f64) -> Option<Vec<f64>> {
        None
    }

    fn domain(&self) -> &StateDomain;

    /// Fundamental period of the explicit time dependence, if any.
    fn forcing_period(&self) -> Option<f64> {
        None
    }

    /// `false` when evaluating `f` at `(x, t)` required clamping or otherwise
    /// left the physically meaningful range.
    fn in_domain(&self, _x: &[f64], _t: f64) -> bool {
        true
    }
}

impl fmt::Debug for dyn OdeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OdeSystem")
            .field("name", &self.name())
            .field("dim", &self.dim())
            .finish()
    }
}

fn check_dim(sys: &dyn OdeSystem, x: &[f64]) -> Result<()> {
    if x.len() != sys.dim() {
        return Err(Error::Dimension {
            expected: sys.dim(),
            got: x.len(),
        });
    }
    Ok(())
}

/// Evaluates `f(state, t)` with shape and finiteness checks.
pub fn eval_rhs(sys: &dyn OdeSystem, state: &[f64], t: f64) -> Result<Vec<f64>> {
    check_dim(sys, state)?;
    let mut out = vec![0.0; sys.dim()];
    sys.rhs(state, t, &mut out);
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Overflow(format!(
            "{}: rhs component {i} is {} at t = {t:e}",
            sys.name(),
            out[i]
        )));
    }
    Ok(out)
}

/// Jacobian of `f` at `(state, t)`: analytic when available, otherwise
/// central finite differences.
pub fn eval_jacobian(sys: &dyn OdeSystem, state: &[f64], t: f64) -> Result<Matrix> {
    check_dim(sys, state)?;
    let jac = match sys.jacobian(state, t) {
        Some(j) => j,
        None => return fd_jacobian(sys, state, t),
    };
    if !jac.is_finite() {
        return Err(Error::Overflow(format!("{}: non-finite Jacobian", sys.name())));
    }
    Ok(jac)
}

/// Central finite-difference Jacobian with per-component step
/// `h_i = max(FD_EPS_ABS, FD_EPS_REL·|x_i|)`.
pub fn fd_jacobian(sys: &dyn OdeSystem, state: &[f64], t: f64) -> Result<Matrix> {
    check_dim(sys, state)?;
    let n = sys.dim();
    let mut jac = Matrix::zeros(n, n);
    let mut xp = state.to_vec();
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    for j in 0..n {
        let h = FD_EPS_ABS.max(FD_EPS_REL * state[j].abs());
        xp[j] = state[j] + h;
        sys.rhs(&xp, t, &mut fp);
        xp[j] = state[j] - h;
        sys.rhs(&xp, t, &mut fm);
        xp[j] = state[j];
        for i in 0..n {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    if !jac.is_finite() {
        return Err(Error::Overflow(format!(
            "{}: non-finite finite-difference Jacobian",
            sys.name()
        )));
    }
    Ok(jac)
}

/// Two-species predator-prey model
/// `x1' = -x1 + x1 x2`, `x2' = 2 x2 - x1 x2` on `[0, 5]²`.
#[derive(Debug, Clone)]
pub struct LotkaVolterra {
    domain: StateDomain,
}

impl LotkaVolterra {
    pub const NAME: &'static str = "lotka_volterra";

    pub fn new() -> Self {
        Self {
            domain: StateDomain::linear(vec![(0.0, 5.0), (0.0, 5.0)]),
        }
    }
}

impl Default for LotkaVolterra {
    fn default() -> Self {
        Self::new()
    }
}

impl OdeSystem for LotkaVolterra {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn dim(&self) -> usize {
        2
    }

    fn is_autonomous(&self) -> bool {
        true
    }

    fn rhs(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        out[0] = -x[0] + x[0] * x[1];
        out[1] = 2.0 * x[1] - x[0] * x[1];
    }

    fn jacobian(&self, x: &[f64], _t: f64) -> Option<Matrix> {
        Some(Matrix::from_rows(&[
            &[-1.0 + x[1], x[0]],
            &[-x[1], 2.0 - x[0]],
        ]))
    }

    fn domain(&self) -> &StateDomain {
        &self.domain
    }
}

/// Circuit constants of the ring modulator.
#[derive(Debug, Clone, PartialEq)]
pub struct RingModulatorParams {
    pub c: f64,
    pub cs: f64,
    pub cp: f64,
    pub lh: f64,
    pub ls1: f64,
    pub ls2: f64,
    pub ls3: f64,
    pub gamma: f64,
    pub r: f64,
    pub rp: f64,
    pub rg1: f64,
    pub rg2: f64,
    pub rg3: f64,
    pub ri: f64,
    pub rc: f64,
    pub delta: f64,
}

impl Default for RingModulatorParams {
    fn default() -> Self {
        Self {
            c: 1.6e-8,
            cs: 2e-12,
            cp: 1e-8,
            lh: 4.45,
            ls1: 0.002,
            ls2: 5e-4,
            ls3: 5e-4,
            gamma: 40.67286402e-9,
            r: 25000.0,
            rp: 50.0,
            rg1: 36.3,
            rg2: 17.3,
            rg3: 17.3,
            ri: 50.0,
            rc: 600.0,
            delta: 17.7493332,
        }
    }
}

/// Largest diode exponent `δU` evaluated before clamping.
pub const DIODE_EXPONENT_CLAMP: f64 = 50.0;

/// 15-dimensional ring modulator driven by a 1 kHz and a 10 kHz source.
///
/// The state is `(U1..U7, I1..I8)`: seven node voltages followed by eight
/// inductor currents.
#[derive(Debug, Clone)]
pub struct RingModulator {
    pub params: RingModulatorParams,
    domain: StateDomain,
}

// Sign pattern of U_D1..U_D4 in terms of (y3, y4, y5, y6, y7) and U_in2.
const DIODE_VOLTAGE: [[f64; 5]; 4] = [
    [1.0, 0.0, -1.0, 0.0, -1.0],
    [0.0, -1.0, 0.0, 1.0, -1.0],
    [0.0, 1.0, 1.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0, -1.0, 1.0],
];
const DIODE_SOURCE: [f64; 4] = [-1.0, -1.0, 1.0, 1.0];
// Weight of q(U_Dk) in the equations for y3..y7.
const DIODE_CURRENT: [[f64; 4]; 5] = [
    [-1.0, 0.0, 0.0, 1.0],
    [0.0, 1.0, -1.0, 0.0],
    [1.0, 0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0, 1.0],
    [1.0, 1.0, -1.0, -1.0],
];

impl RingModulator {
    pub const NAME: &'static str = "ring_modulator";
    pub const PERIOD: f64 = 1e-3;

    pub fn new() -> Self {
        Self::with_params(RingModulatorParams::default())
    }

    pub fn with_params(params: RingModulatorParams) -> Self {
        // I1 and I2 are the slow inductor currents; the others share a box.
        let mut bounds = vec![(-1e-3, 1e-3); 15];
        bounds[7] = (-1e-5, 1e-7);
        bounds[8] = (-1e-6, 1e-6);
        Self {
            params,
            domain: StateDomain::linear(bounds),
        }
    }

    pub fn u_in1(t: f64) -> f64 {
        0.5 * (2000.0 * PI * t).sin()
    }

    pub fn u_in2(t: f64) -> f64 {
        2.0 * (20000.0 * PI * t).sin()
    }

    /// Diode characteristic `q(U) = γ(e^{δU} − 1)` with the exponent clamped
    /// at [`DIODE_EXPONENT_CLAMP`].
    pub fn diode(&self, u: f64) -> f64 {
        let arg = (self.params.delta * u).min(DIODE_EXPONENT_CLAMP);
        self.params.gamma * arg.exp_m1()
    }

    fn diode_slope(&self, u: f64) -> f64 {
        let arg = self.params.delta * u;
        if arg > DIODE_EXPONENT_CLAMP {
            0.0
        } else {
            self.params.gamma * self.params.delta * arg.exp()
        }
    }

    /// Diode voltages `U_D1..U_D4`.
    pub fn diode_voltages(y: &[f64], t: f64) -> [f64; 4] {
        let u2 = Self::u_in2(t);
        let mut ud = [0.0; 4];
        for (k, row) in DIODE_VOLTAGE.iter().enumerate() {
            ud[k] = row.iter().zip(&y[2..7]).map(|(c, v)| c * v).sum::<f64>()
                + DIODE_SOURCE[k] * u2;
        }
        ud
    }
}

impl Default for RingModulator {
    fn default() -> Self {
        Self::new()
    }
}

impl OdeSystem for RingModulator {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn dim(&self) -> usize {
        15
    }

    fn is_autonomous(&self) -> bool {
        false
    }

    fn rhs(&self, y: &[f64], t: f64, out: &mut [f64]) {
        let p = &self.params;
        let ud = Self::diode_voltages(y, t);
        let q = ud.map(|u| self.diode(u));
        let caps = [p.cs, p.cs, p.cs, p.cs, p.cp];
        out[0] = (y[7] - 0.5 * y[9] + 0.5 * y[10] + y[13] - y[0] / p.r) / p.c;
        out[1] = (y[8] - 0.5 * y[11] + 0.5 * y[12] + y[14] - y[1] / p.r) / p.c;
        let linear = [y[9], -y[10], y[11], -y[12], -y[6] / p.rp];
        for r in 0..5 {
            let diode: f64 = DIODE_CURRENT[r].iter().zip(&q).map(|(w, qk)| w * qk).sum();
            out[2 + r] = (linear[r] + diode) / caps[r];
        }
        out[7] = -y[0] / p.lh;
        out[8] = -y[0] / p.lh;
        out[9] = (0.5 * y[0] - y[2] - p.rg2 * y[9]) / p.ls2;
        out[10] = (-0.5 * y[0] + y[3] - p.rg3 * y[10]) / p.ls3;
        out[11] = (0.5 * y[1] - y[4] - p.rg2 * y[11]) / p.ls2;
        out[12] = (-0.5 * y[1] + y[5] - p.rg3 * y[12]) / p.ls3;
        out[13] = (-y[0] + Self::u_in1(t) - (p.ri + p.rg1) * y[13]) / p.ls1;
        out[14] = (-y[1] - (p.rc + p.rg1) * y[14]) / p.ls1;
    }

    fn jacobian(&self, y: &[f64], t: f64) -> Option<Matrix> {
        let p = &self.params;
        let mut j = Matrix::zeros(15, 15);
        j[(0, 0)] = -1.0 / (p.r * p.c);
        j[(0, 7)] = 1.0 / p.c;
        j[(0, 9)] = -0.5 / p.c;
        j[(0, 10)] = 0.5 / p.c;
        j[(0, 13)] = 1.0 / p.c;
        j[(1, 1)] = -1.0 / (p.r * p.c);
        j[(1, 8)] = 1.0 / p.c;
        j[(1, 11)] = -0.5 / p.c;
        j[(1, 12)] = 0.5 / p.c;
        j[(1, 14)] = 1.0 / p.c;

        j[(2, 9)] = 1.0 / p.cs;
        j[(3, 10)] = -1.0 / p.cs;
        j[(4, 11)] = 1.0 / p.cs;
        j[(5, 12)] = -1.0 / p.cs;
        j[(6, 6)] = -1.0 / (p.rp * p.cp);
        let ud = Self::diode_voltages(y, t);
        let slope = ud.map(|u| self.diode_slope(u));
        let caps = [p.cs, p.cs, p.cs, p.cs, p.cp];
        for r in 0..5 {
            for (k, w) in DIODE_CURRENT[r].iter().enumerate() {
                if *w == 0.0 {
                    continue;
                }
                for (c, dv) in DIODE_VOLTAGE[k].iter().enumerate() {
                    j[(2 + r, 2 + c)] += w * slope[k] * dv / caps[r];
                }
            }
        }

        j[(7, 0)] = -1.0 / p.lh;
        j[(8, 0)] = -1.0 / p.lh;
        j[(9, 0)] = 0.5 / p.ls2;
        j[(9, 2)] = -1.0 / p.ls2;
        j[(9, 9)] = -p.rg2 / p.ls2;
        j[(10, 0)] = -0.5 / p.ls3;
        j[(10, 3)] = 1.0 / p.ls3;
        j[(10, 10)] = -p.rg3 / p.ls3;
        j[(11, 1)] = 0.5 / p.ls2;
        j[(11, 4)] = -1.0 / p.ls2;
        j[(11, 11)] = -p.rg2 / p.ls2;
        j[(12, 1)] = -0.5 / p.ls3;
        j[(12, 5)] = 1.0 / p.ls3;
        j[(12, 12)] = -p.rg3 / p.ls3;
        j[(13, 0)] = -1.0 / p.ls1;
        j[(13, 13)] = -(p.ri + p.rg1) / p.ls1;
        j[(14, 1)] = -1.0 / p.ls1;
        j[(14, 14)] = -(p.rc + p.rg1) / p.ls1;
        Some(j)
    }

    fn domain(&self) -> &StateDomain {
        &self.domain
    }

    fn time_derivative(&self, y: &[f64], t: f64) -> Option<Vec<f64>> {
        let p = &self.params;
        let mut out = vec![0.0; 15];
        let du1 = 0.5 * 2000.0 * PI * (2000.0 * PI * t).cos();
        let du2 = 2.0 * 20000.0 * PI * (20000.0 * PI * t).cos();
        let ud = Self::diode_voltages(y, t);
        let caps = [p.cs, p.cs, p.cs, p.cs, p.cp];
        for r in 0..5 {
            out[2 + r] = (0..4)
                .map(|k| DIODE_CURRENT[r][k] * self.diode_slope(ud[k]) * DIODE_SOURCE[k] * du2)
                .sum::<f64>()
                / caps[r];
        }
        out[13] = du1 / p.ls1;
        Some(out)
    }

    fn forcing_period(&self) -> Option<f64> {
        Some(Self::PERIOD)
    }

    fn in_domain(&self, y: &[f64], t: f64) -> bool {
        Self::diode_voltages(y, t)
            .iter()
            .all(|u| self.params.delta * u <= DIODE_EXPONENT_CLAMP)
    }
}

type RhsFn = dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync;
type JacFn = dyn Fn(&[f64], f64) -> Matrix + Send + Sync;

/// Closure-backed system for registering new models without a new type.
#[derive(Clone)]
pub struct SystemSpec {
    name: String,
    dim: usize,
    autonomous: bool,
    rhs: Arc<RhsFn>,
    jacobian: Option<Arc<JacFn>>,
    domain: StateDomain,
    forcing_period: Option<f64>,
}

impl SystemSpec {
    pub fn new(
        name: impl Into<String>,
        domain: StateDomain,
        autonomous: bool,
        rhs: impl Fn(&[f64], f64, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            dim: domain.bounds.len(),
            autonomous,
            rhs: Arc::new(rhs),
            jacobian: None,
            domain,
            forcing_period: None,
        }
    }

    pub fn with_jacobian(
        mut self,
        jac: impl Fn(&[f64], f64) -> Matrix + Send + Sync + 'static,
    ) -> Self {
        self.jacobian = Some(Arc::new(jac));
        self
    }

    pub fn with_forcing_period(mut self, period: f64) -> Self {
        self.forcing_period = Some(period);
        self
    }
}

impl fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("autonomous", &self.autonomous)
            .field("analytic_jacobian", &self.jacobian.is_some())
            .finish()
    }
}

impl OdeSystem for SystemSpec {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn is_autonomous(&self) -> bool {
        self.autonomous
    }

    fn rhs(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (self.rhs)(x, t, out)
    }

    fn jacobian(&self, x: &[f64], t: f64) -> Option<Matrix> {
        self.jacobian.as_ref().map(|j| j(x, t))
    }

    fn domain(&self) -> &StateDomain {
        &self.domain
    }

    fn forcing_period(&self) -> Option<f64> {
        self.forcing_period
    }
}

type Factory = Arc<dyn Fn() -> Arc<dyn OdeSystem> + Send + Sync>;

/// Name → system lookup used by configs and the CLI.
#[derive(Clone)]
pub struct SystemRegistry {
    factories: BTreeMap<String, Factory>,
}

impl SystemRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    /// Registry holding `lotka_volterra` and `ring_modulator`.
    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register(LotkaVolterra::NAME, || Arc::new(LotkaVolterra::new()));
        reg.register(RingModulator::NAME, || Arc::new(RingModulator::new()));
        reg
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        factory: impl Fn() -> Arc<dyn OdeSystem> + Send + Sync + 'static,
    ) {
        self.factories.insert(name.into(), Arc::new(factory));
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn OdeSystem>> {
        self.factories
            .get(name)
            .map(|f| f())
            .ok_or_else(|| Error::Config(format!("unknown system '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }
}

impl Default for SystemRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

/// Looks up one of the built-in systems by name.
pub fn system_by_name(name: &str) -> Result<Arc<dyn OdeSystem>> {
    SystemRegistry::with_builtins().get(name)
}
