//! Computational singular perturbation (CSP) timescale analysis.
//!
//! The Jacobian `J` of `f` at a state is decomposed as `J = A Λ B` with
//! `B = A⁻¹`. Each mode has timescale `τᵢ = 1/|λᵢ|` and amplitude
//! `fᵢ = bᵢ·f(x)`. Sorting modes by timescale, the first `M` are *fast* and
//! considered exhausted when their contribution over the next timescale,
//!
//! ```text
//! | Σ_{i<M} a_i^j f_i (exp(λ_i τ_M) − 1) / λ_i |  <  tol_rel·|x_j| + tol_abs   for all j,
//! ```
//!
//! is below the error tolerance. `τ_csp = τ_M` is the fastest timescale of the
//! remaining slow modes.
//!
//! The dense eigen-solver is self-contained: balancing, Householder reduction
//! to Hessenberg form, the Francis double-shift QR iteration for eigenvalues
//! and complex inverse iteration for eigenvectors.

use num_complex::Complex64;

use crate::dynamics::{eval_jacobian, eval_rhs, OdeSystem};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Residual tolerance of the eigen-decomposition checks.
pub const DECOMPOSITION_TOL: f64 = 1e-8;

/// Largest Jacobian handled by default.
pub const DEFAULT_MAX_DIM: usize = 64;

/// Dense complex square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    n: usize,
    data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![Complex64::new(0.0, 0.0); n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_real(a: &Matrix) -> Self {
        assert_eq!(a.rows(), a.cols());
        Self {
            n: a.rows(),
            data: a.as_slice().iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn matmul(&self, other: &CMatrix) -> CMatrix {
        let n = self.n;
        let mut out = CMatrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self[(i, k)];
                if a == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for j in 0..n {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn column(&self, j: usize) -> Vec<Complex64> {
        (0..self.n).map(|i| self[(i, j)]).collect()
    }

    pub fn row(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

impl std::ops::Index<(usize, usize)> for CMatrix {
    type Output = Complex64;
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.n + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.n + j]
    }
}

/// Complex LU with partial pivoting. Tiny pivots are replaced by `floor`
/// so that nearly singular shifted systems (inverse iteration) still solve.
struct CLu {
    n: usize,
    lu: Vec<Complex64>,
    perm: Vec<usize>,
}

impl CLu {
    fn factor(a: &CMatrix, floor: f64) -> Option<Self> {
        let n = a.n;
        let mut lu = a.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].norm();
            for i in k + 1..n {
                let v = lu[i * n + k].norm();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !best.is_finite() {
                return None;
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            if best <= floor {
                if floor == 0.0 {
                    return None;
                }
                lu[k * n + k] = Complex64::new(floor, 0.0);
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                for j in k + 1..n {
                    let t = lu[k * n + j];
                    lu[i * n + j] -= f * t;
                }
            }
        }
        Some(Self { n, lu, perm })
    }

    fn solve(&self, b: &[Complex64]) -> Vec<Complex64> {
        let n = self.n;
        let mut x: Vec<Complex64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                let t = self.lu[i * n + j] * x[j];
                x[i] -= t;
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let t = self.lu[i * n + j] * x[j];
                x[i] -= t;
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }

    fn inverse(&self) -> CMatrix {
        let n = self.n;
        let mut inv = CMatrix::zeros(n);
        let mut e = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
            e[j] = Complex64::new(1.0, 0.0);
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv
    }
}

/// Diagonal similarity `D⁻¹ A D` with power-of-two entries that equalizes
/// row and column norms. Returns the balanced matrix and `diag(D)`.
fn balance(a: &Matrix) -> (Matrix, Vec<f64>) {
    const RADIX: f64 = 2.0;
    let n = a.rows();
    let mut m = a.clone();
    let mut scale = vec![1.0; n];
    let mut done = false;
    while !done {
        done = true;
        for i in 0..n {
            let mut r = 0.0;
            let mut c = 0.0;
            for j in 0..n {
                if j != i {
                    c += m[(j, i)].abs();
                    r += m[(i, j)].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut g = r / RADIX;
            while c < g {
                f *= RADIX;
                c *= RADIX * RADIX;
            }
            g = r * RADIX;
            while c > g {
                f /= RADIX;
                c /= RADIX * RADIX;
            }
            if (c + r) / f < 0.95 * s {
                done = false;
                for j in 0..n {
                    m[(i, j)] /= f;
                    m[(j, i)] *= f;
                }
                scale[i] *= f;
            }
        }
    }
    (m, scale)
}

/// Householder reduction `H = Qᵀ A Q`. Returns `(H, Q)`; `Q` is only
/// accumulated when `want_q` is set.
fn hessenberg(a: &Matrix, want_q: bool) -> (Matrix, Option<Matrix>) {
    let n = a.rows();
    let mut h = a.clone();
    let mut q = want_q.then(|| Matrix::identity(n));
    for k in 0..n.saturating_sub(2) {
        let norm: f64 = (k + 1..n).map(|i| h[(i, k)] * h[(i, k)]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if h[(k + 1, k)] > 0.0 { -norm } else { norm };
        let mut v = vec![0.0; n];
        v[k + 1] = h[(k + 1, k)] - alpha;
        for i in k + 2..n {
            v[i] = h[(i, k)];
        }
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        let beta = 2.0 / vnorm2;
        // H <- (I - β v vᵀ) H
        for j in 0..n {
            let s: f64 = (k + 1..n).map(|i| v[i] * h[(i, j)]).sum::<f64>() * beta;
            for i in k + 1..n {
                h[(i, j)] -= s * v[i];
            }
        }
        // H <- H (I - β v vᵀ)
        for i in 0..n {
            let s: f64 = (k + 1..n).map(|j| h[(i, j)] * v[j]).sum::<f64>() * beta;
            for j in k + 1..n {
                h[(i, j)] -= s * v[j];
            }
        }
        if let Some(q) = q.as_mut() {
            for i in 0..n {
                let s: f64 = (k + 1..n).map(|j| q[(i, j)] * v[j]).sum::<f64>() * beta;
                for j in k + 1..n {
                    q[(i, j)] -= s * v[j];
                }
            }
        }
        h[(k + 1, k)] = alpha;
        for i in k + 2..n {
            h[(i, k)] = 0.0;
        }
    }
    (h, q)
}

fn sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

/// Eigenvalues of an upper Hessenberg matrix by the Francis double-shift QR
/// iteration. Conjugate pairs come out adjacent. `a` is destroyed.
fn hqr(a: &mut Matrix) -> Result<Vec<Complex64>> {
    let n = a.rows();
    let mut wr = vec![0.0; n];
    let mut wi = vec![0.0; n];
    let mut anorm = 0.0;
    for i in 0..n {
        for j in i.saturating_sub(1)..n {
            anorm += a[(i, j)].abs();
        }
    }
    let mut nn = n as isize - 1;
    let mut t = 0.0;
    while nn >= 0 {
        let mut its = 0;
        loop {
            let nu = nn as usize;
            let mut l = nu;
            while l >= 1 {
                let mut s = a[(l - 1, l - 1)].abs() + a[(l, l)].abs();
                if s == 0.0 {
                    s = anorm;
                }
                if a[(l, l - 1)].abs() + s == s {
                    a[(l, l - 1)] = 0.0;
                    break;
                }
                l -= 1;
            }
            let mut x = a[(nu, nu)];
            if l == nu {
                wr[nu] = x + t;
                wi[nu] = 0.0;
                nn -= 1;
                break;
            }
            let mut y = a[(nu - 1, nu - 1)];
            let mut w = a[(nu, nu - 1)] * a[(nu - 1, nu)];
            if l == nu - 1 {
                let p = 0.5 * (y - x);
                let q = p * p + w;
                let mut z = q.abs().sqrt();
                x += t;
                if q >= 0.0 {
                    z = p + sign(z, p);
                    wr[nu - 1] = x + z;
                    wr[nu] = x + z;
                    if z != 0.0 {
                        wr[nu] = x - w / z;
                    }
                    wi[nu - 1] = 0.0;
                    wi[nu] = 0.0;
                } else {
                    wr[nu - 1] = x + p;
                    wr[nu] = x + p;
                    wi[nu - 1] = -z;
                    wi[nu] = z;
                }
                nn -= 2;
                break;
            }
            if its == 60 {
                return Err(Error::Decomposition("QR iteration did not converge".into()));
            }
            if its == 10 || its == 20 {
                // exceptional shift
                t += x;
                for i in 0..=nu {
                    a[(i, i)] -= x;
                }
                let s = a[(nu, nu - 1)].abs() + a[(nu - 1, nu - 2)].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            its += 1;
            let (mut p, mut q, mut r, mut z);
            let mut m = nu - 2;
            loop {
                z = a[(m, m)];
                r = x - z;
                let s = y - z;
                p = (r * s - w) / a[(m + 1, m)] + a[(m, m + 1)];
                q = a[(m + 1, m + 1)] - z - r - s;
                r = a[(m + 2, m + 1)];
                let s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                let u = a[(m, m - 1)].abs() * (q.abs() + r.abs());
                let v = p.abs() * (a[(m - 1, m - 1)].abs() + z.abs() + a[(m + 1, m + 1)].abs());
                if u + v == v {
                    break;
                }
                m -= 1;
            }
            for i in m + 2..=nu {
                a[(i, i - 2)] = 0.0;
                if i != m + 2 {
                    a[(i, i - 3)] = 0.0;
                }
            }
            let mut k = m;
            while k + 1 <= nu {
                if k != m {
                    p = a[(k, k - 1)];
                    q = a[(k + 1, k - 1)];
                    r = 0.0;
                    if k + 1 != nu {
                        r = a[(k + 2, k - 1)];
                    }
                    x = p.abs() + q.abs() + r.abs();
                    if x != 0.0 {
                        p /= x;
                        q /= x;
                        r /= x;
                    }
                }
                let s = sign((p * p + q * q + r * r).sqrt(), p);
                if s != 0.0 {
                    if k == m {
                        if l != m {
                            a[(k, k - 1)] = -a[(k, k - 1)];
                        }
                    } else {
                        a[(k, k - 1)] = -s * x;
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q /= p;
                    r /= p;
                    for j in k..=nu {
                        let mut pp = a[(k, j)] + q * a[(k + 1, j)];
                        if k + 1 != nu {
                            pp += r * a[(k + 2, j)];
                            a[(k + 2, j)] -= pp * z;
                        }
                        a[(k + 1, j)] -= pp * y;
                        a[(k, j)] -= pp * x;
                    }
                    let mmin = if nu < k + 3 { nu } else { k + 3 };
                    for i in l..=mmin {
                        let mut pp = x * a[(i, k)] + y * a[(i, k + 1)];
                        if k + 1 != nu {
                            pp += z * a[(i, k + 2)];
                            a[(i, k + 2)] -= pp * r;
                        }
                        a[(i, k + 1)] -= pp * q;
                        a[(i, k)] -= pp;
                    }
                }
                k += 1;
            }
        }
    }
    Ok(wr.into_iter().zip(wi).map(|(r, i)| Complex64::new(r, i)).collect())
}

fn check_input(j: &Matrix, max_dim: usize) -> Result<()> {
    if j.rows() != j.cols() {
        return Err(Error::Dimension {
            expected: j.rows(),
            got: j.cols(),
        });
    }
    if j.rows() > max_dim {
        return Err(Error::Config(format!(
            "Jacobian dimension {} exceeds the cap of {max_dim}",
            j.rows()
        )));
    }
    if !j.is_finite() {
        return Err(Error::Overflow("non-finite Jacobian".into()));
    }
    Ok(())
}

/// Eigenvalues only.
pub fn eigenvalues(j: &Matrix) -> Result<Vec<Complex64>> {
    check_input(j, usize::MAX)?;
    let (b, _) = balance(j);
    let (mut h, _) = hessenberg(&b, false);
    hqr(&mut h)
}

/// Full eigen-decomposition `J A = A Λ`, `B = A⁻¹`.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<Complex64>,
    /// Right eigenvectors as unit-norm columns.
    pub a: CMatrix,
    /// Rows are the left eigenvectors, `B A = I`.
    pub b: CMatrix,
}

impl EigenDecomposition {
    /// `‖J A − A Λ‖_F`.
    pub fn residual(&self, j: &Matrix) -> f64 {
        let n = self.a.dim();
        let ja = CMatrix::from_real(j).matmul(&self.a);
        let mut s = 0.0;
        for r in 0..n {
            for c in 0..n {
                s += (ja[(r, c)] - self.a[(r, c)] * self.eigenvalues[c]).norm_sqr();
            }
        }
        s.sqrt()
    }

    /// `‖B A − I‖_F`.
    pub fn inverse_residual(&self) -> f64 {
        let mut ba = self.b.matmul(&self.a);
        for i in 0..ba.dim() {
            ba[(i, i)] -= Complex64::new(1.0, 0.0);
        }
        ba.frobenius_norm()
    }
}

/// Eigen-decomposition with the default dimension cap.
pub fn eig_decompose(j: &Matrix) -> Result<EigenDecomposition> {
    eig_decompose_capped(j, DEFAULT_MAX_DIM)
}

pub fn eig_decompose_capped(j: &Matrix, max_dim: usize) -> Result<EigenDecomposition> {
    check_input(j, max_dim)?;
    let n = j.rows();
    let (bal, scale) = balance(j);
    let (h, q) = hessenberg(&bal, true);
    let q = q.expect("Q requested");
    let lambdas = hqr(&mut h.clone())?;

    let hnorm = h.frobenius_norm().max(f64::MIN_POSITIVE);
    let eps = f64::EPSILON * hnorm;
    let hc = CMatrix::from_real(&h);
    // eigenvectors of H, columns of W
    let mut w = CMatrix::zeros(n);
    let mut done: Vec<Option<Vec<Complex64>>> = vec![None; n];
    let cluster_tol = 1e3 * eps;
    for k in 0..n {
        if done[k].is_some() {
            continue;
        }
        let lam = lambdas[k];
        let mut shifted = hc.clone();
        for i in 0..n {
            shifted[(i, i)] -= lam;
        }
        let lu = CLu::factor(&shifted, eps)
            .ok_or_else(|| Error::Decomposition("shifted Hessenberg factorization failed".into()))?;
        // earlier vectors for (nearly) the same eigenvalue, to orthogonalize against
        let cluster: Vec<&Vec<Complex64>> = (0..k)
            .filter(|&i| (lambdas[i] - lam).norm() <= cluster_tol.max(1e-10 * lam.norm()))
            .filter_map(|i| done[i].as_ref())
            .collect();
        let mut v: Vec<Complex64> = (0..n)
            .map(|i| Complex64::new(1.0 + ((i * 7 + k * 13) % 11) as f64 * 0.1, 0.0))
            .collect();
        for _ in 0..4 {
            for u in &cluster {
                let dot: Complex64 = u.iter().zip(&v).map(|(a, b)| a.conj() * b).sum();
                for (vi, ui) in v.iter_mut().zip(u.iter()) {
                    *vi -= dot * ui;
                }
            }
            v = lu.solve(&v);
            let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if !norm.is_finite() || norm == 0.0 {
                return Err(Error::Decomposition("inverse iteration broke down".into()));
            }
            v.iter_mut().for_each(|z| *z /= norm);
        }
        for u in &cluster {
            let dot: Complex64 = u.iter().zip(&v).map(|(a, b)| a.conj() * b).sum();
            for (vi, ui) in v.iter_mut().zip(u.iter()) {
                *vi -= dot * ui;
            }
        }
        let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        v.iter_mut().for_each(|z| *z /= norm);
        // conjugate partner gets the exact conjugate vector
        if lam.im != 0.0 && k + 1 < n && lambdas[k + 1] == lam.conj() {
            done[k + 1] = Some(v.iter().map(|z| z.conj()).collect());
        }
        done[k] = Some(v);
    }
    for (c, v) in done.iter().enumerate() {
        for (r, z) in v.as_ref().expect("all vectors computed").iter().enumerate() {
            w[(r, c)] = *z;
        }
    }

    // A = D Q W, columns normalized; B = W⁻¹ Qᵀ D⁻¹ with the same scaling
    let qc = CMatrix::from_real(&q);
    let mut a = qc.matmul(&w);
    for r in 0..n {
        for c in 0..n {
            a[(r, c)] *= scale[r];
        }
    }
    for c in 0..n {
        let norm = (0..n).map(|r| a[(r, c)].norm_sqr()).sum::<f64>().sqrt();
        for r in 0..n {
            a[(r, c)] /= norm;
            w[(r, c)] /= norm;
        }
    }
    let winv = CLu::factor(&w, 0.0)
        .ok_or_else(|| Error::Decomposition("eigenvector matrix is singular".into()))?
        .inverse();
    let mut qt = CMatrix::zeros(n);
    for r in 0..n {
        for c in 0..n {
            qt[(r, c)] = Complex64::new(q[(c, r)] / scale[c], 0.0);
        }
    }
    let b = winv.matmul(&qt);

    let dec = EigenDecomposition {
        eigenvalues: lambdas,
        a,
        b,
    };
    let jn = j.frobenius_norm();
    let res = dec.residual(j);
    if !(res <= DECOMPOSITION_TOL * jn) {
        return Err(Error::Decomposition(format!(
            "eigen residual {res:e} exceeds {DECOMPOSITION_TOL:e}·‖J‖ = {:e}",
            DECOMPOSITION_TOL * jn
        )));
    }
    let inv = dec.inverse_residual();
    if !(inv <= DECOMPOSITION_TOL) {
        return Err(Error::Decomposition(format!(
            "eigenbasis is ill-conditioned: ‖BA − I‖ = {inv:e}"
        )));
    }
    Ok(dec)
}

/// Tolerances of the fast-mode criterion.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CspConfig {
    pub tol_rel: f64,
    pub tol_abs: f64,
    pub max_dim: usize,
}

impl Default for CspConfig {
    fn default() -> Self {
        Self {
            tol_rel: 1e-4,
            tol_abs: 1e-10,
            max_dim: DEFAULT_MAX_DIM,
        }
    }
}

impl CspConfig {
    pub fn new(tol_rel: f64, tol_abs: f64) -> Self {
        Self {
            tol_rel,
            tol_abs,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol_rel > 0.0 && self.tol_abs > 0.0) {
            return Err(Error::Config("CSP tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CspReport {
    /// Eigenvalues in the order of `timescales`.
    pub eigenvalues: Vec<Complex64>,
    /// `1/|λᵢ|` ascending; `+inf` for zero eigenvalues.
    pub timescales: Vec<f64>,
    /// Number of fast (exhausted) modes `M`.
    pub split_index: usize,
    /// `timescales[split_index]`.
    pub tau_csp: f64,
    /// `|bᵢ·f|` in the order of `timescales`; empty when degraded.
    pub amplitudes: Vec<f64>,
    /// The eigenbasis was unusable and `tau_csp = 1/max|λ|`.
    pub degraded: bool,
}

/// `(exp(λτ) − 1)/λ`, with the limits `τ` for `λ → 0` and `−1/λ` for `τ → ∞`.
fn phi(lambda: Complex64, tau: f64) -> Complex64 {
    if tau.is_infinite() {
        return if lambda.re < 0.0 {
            -1.0 / lambda
        } else {
            Complex64::new(f64::INFINITY, 0.0)
        };
    }
    let z = lambda * tau;
    if z.norm() < 1e-4 {
        tau * (1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0)
    } else {
        (z.exp() - 1.0) / lambda
    }
}

fn timescale(l: Complex64) -> f64 {
    let m = l.norm();
    if m == 0.0 {
        f64::INFINITY
    } else {
        1.0 / m
    }
}

/// CSP analysis at `(x, t)`.
///
/// `M` grows one mode at a time while the fast-mode contribution over the
/// next timescale stays below `tol_rel·|x| + tol_abs`, never separating a
/// complex-conjugate pair. Falls back to `1/max|λ|` (flagged as degraded)
/// when the eigenbasis cannot be computed reliably.
pub fn tau_csp(sys: &dyn OdeSystem, x: &[f64], t: f64, cfg: &CspConfig) -> Result<CspReport> {
    cfg.validate()?;
    let j = eval_jacobian(sys, x, t)?;
    let omega = eval_rhs(sys, x, t)?;
    csp_analysis(&j, &omega, x, cfg)
}

/// [`tau_csp`] on an explicit Jacobian and right-hand side.
pub fn csp_analysis(j: &Matrix, omega: &[f64], x: &[f64], cfg: &CspConfig) -> Result<CspReport> {
    let n = j.rows();
    if omega.len() != n || x.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: omega.len().min(x.len()),
        });
    }
    let dec = match eig_decompose_capped(j, cfg.max_dim) {
        Ok(d) => d,
        Err(Error::Decomposition(_)) => return degraded_report(j),
        Err(e) => return Err(e),
    };
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps conjugate partners adjacent
    order.sort_by(|&a, &b| timescale(dec.eigenvalues[a]).total_cmp(&timescale(dec.eigenvalues[b])));
    let lambdas: Vec<Complex64> = order.iter().map(|&i| dec.eigenvalues[i]).collect();
    let timescales: Vec<f64> = lambdas.iter().map(|&l| timescale(l)).collect();
    let f: Vec<Complex64> = order
        .iter()
        .map(|&i| {
            dec.b
                .row(i)
                .iter()
                .zip(omega)
                .map(|(b, w)| b * w)
                .sum::<Complex64>()
        })
        .collect();
    let a_cols: Vec<Vec<Complex64>> = order.iter().map(|&i| dec.a.column(i)).collect();
    let tol: Vec<f64> = x.iter().map(|v| cfg.tol_rel * v.abs() + cfg.tol_abs).collect();

    let pair_split = |m: usize| -> bool {
        m > 0 && m < n && lambdas[m - 1].im != 0.0 && lambdas[m] == lambdas[m - 1].conj()
    };
    let mut split = 0;
    for m in 1..n {
        if pair_split(m) {
            continue;
        }
        let tau_next = timescales[m];
        let ok = (0..n).all(|row| {
            let s: Complex64 = (0..m)
                .map(|i| a_cols[i][row] * f[i] * phi(lambdas[i], tau_next))
                .sum();
            s.norm() < tol[row]
        });
        if !ok {
            break;
        }
        split = m;
    }
    Ok(CspReport {
        tau_csp: timescales[split],
        eigenvalues: lambdas,
        timescales,
        split_index: split,
        amplitudes: f.iter().map(|z| z.norm()).collect(),
        degraded: false,
    })
}

fn degraded_report(j: &Matrix) -> Result<CspReport> {
    let mut lambdas = eigenvalues(j)?;
    lambdas.sort_by(|a, b| timescale(*a).total_cmp(&timescale(*b)));
    let timescales: Vec<f64> = lambdas.iter().map(|&l| timescale(l)).collect();
    Ok(CspReport {
        tau_csp: timescales.first().copied().unwrap_or(f64::INFINITY),
        eigenvalues: lambdas,
        timescales,
        split_index: 0,
        amplitudes: Vec::new(),
        degraded: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    Csp,
    LambdaMax,
}

/// Characteristic time of a state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CharTime {
    /// Seconds; `+inf` when every eigenvalue is zero.
    pub value: f64,
    /// Computed by the `1/max|λ|` fallback instead of the requested CSP mode.
    pub degraded: bool,
}

impl CharTime {
    pub fn is_infinite(&self) -> bool {
        self.value.is_infinite()
    }
}

/// `tau_csp` in [`TimeMode::Csp`], `1/max|λ|` in [`TimeMode::LambdaMax`].
pub fn characteristic_time(
    sys: &dyn OdeSystem,
    x: &[f64],
    t: f64,
    mode: TimeMode,
    cfg: &CspConfig,
) -> Result<CharTime> {
    match mode {
        TimeMode::Csp => {
            let r = tau_csp(sys, x, t, cfg)?;
            Ok(CharTime {
                value: r.tau_csp,
                degraded: r.degraded,
            })
        }
        TimeMode::LambdaMax => {
            let j = eval_jacobian(sys, x, t)?;
            if j.rows() > cfg.max_dim {
                return Err(Error::Config(format!(
                    "Jacobian dimension {} exceeds the cap of {}",
                    j.rows(),
                    cfg.max_dim
                )));
            }
            let max = eigenvalues(&j)?.iter().fold(0.0f64, |m, l| m.max(l.norm()));
            Ok(CharTime {
                value: if max == 0.0 { f64::INFINITY } else { 1.0 / max },
                degraded: false,
            })
        }
    }
}

/// Log-spaced histogram edges.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LogBins {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Default for LogBins {
    fn default() -> Self {
        Self {
            lo: 1e-14,
            hi: 1e2,
            n: 40,
        }
    }
}

impl LogBins {
    pub fn edges(&self) -> Vec<f64> {
        let (a, b) = (self.lo.log10(), self.hi.log10());
        (0..=self.n)
            .map(|i| 10f64.powf(a + (b - a) * i as f64 / self.n as f64))
            .collect()
    }

    /// Bin of a finite positive value; values outside `[lo, hi]` are clipped
    /// to the end bins.
    pub fn index(&self, v: f64) -> usize {
        let (a, b) = (self.lo.log10(), self.hi.log10());
        let f = (v.log10() - a) / (b - a) * self.n as f64;
        if f.is_nan() || f < 0.0 {
            0
        } else {
            (f as usize).min(self.n - 1)
        }
    }
}

/// Normalized histogram of characteristic times of one chain step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepHistogram {
    pub step: u32,
    pub counts: Vec<usize>,
    /// Rows with an infinite characteristic time.
    pub overflow: usize,
    pub total: usize,
}

impl StepHistogram {
    pub fn fractions(&self) -> Vec<f64> {
        let t = self.total.max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / t).collect()
    }

    pub fn overflow_fraction(&self) -> f64 {
        self.overflow as f64 / self.total.max(1) as f64
    }

    /// Indices of nonempty bins; the overflow bin is index `counts.len()`.
    pub fn occupied(&self) -> Vec<usize> {
        let mut v: Vec<usize> = (0..self.counts.len()).filter(|&i| self.counts[i] > 0).collect();
        if self.overflow > 0 {
            v.push(self.counts.len());
        }
        v
    }

    /// L1 distance between the normalized histograms, overflow included.
    pub fn l1(&self, other: &StepHistogram) -> f64 {
        self.fractions()
            .iter()
            .zip(other.fractions())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            + (self.overflow_fraction() - other.overflow_fraction()).abs()
    }
}

/// Characteristic-time histograms per chain step (roots and manifold rows
/// are step 0), ordered by step.
pub fn timescale_histogram(
    ds: &crate::dataset::Dataset,
    sys: &dyn OdeSystem,
    mode: TimeMode,
    bins: &LogBins,
    cfg: &CspConfig,
) -> Result<Vec<StepHistogram>> {
    use rayon::prelude::*;
    if !(bins.lo > 0.0 && bins.hi > bins.lo && bins.n > 0) {
        return Err(Error::Config("histogram needs 0 < lo < hi and at least one bin".into()));
    }
    let times: Vec<f64> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            characteristic_time(sys, ds.state(i), ds.time(i).unwrap_or(0.0), mode, cfg).map(|c| c.value)
        })
        .collect::<Result<_>>()?;
    let mut by_step: std::collections::BTreeMap<u32, StepHistogram> = Default::default();
    for (i, v) in times.into_iter().enumerate() {
        let step = ds.provenance(i).step();
        let h = by_step.entry(step).or_insert_with(|| StepHistogram {
            step,
            counts: vec![0; bins.n],
            overflow: 0,
            total: 0,
        });
        h.total += 1;
        if v.is_infinite() {
            h.overflow += 1;
        } else {
            h.counts[bins.index(v)] += 1;
        }
    }
    Ok(by_step.into_values().collect())
}

/// Histogram CSV `step,bin_lo,bin_hi,fraction`; the overflow bin spans
/// `[hi, inf)`.
pub fn write_histogram_csv<W: std::io::Write>(mut w: W, hists: &[StepHistogram], bins: &LogBins) -> Result<()> {
    let edges = bins.edges();
    writeln!(w, "step,bin_lo,bin_hi,fraction")?;
    for h in hists {
        for (b, f) in h.fractions().iter().enumerate() {
            writeln!(w, "{},{:e},{:e},{}", h.step, edges[b], edges[b + 1], f)?;
        }
        writeln!(w, "{},{:e},inf,{}", h.step, bins.hi, h.overflow_fraction())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{LotkaVolterra, StateDomain, SystemSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sorted(mut v: Vec<Complex64>) -> Vec<Complex64> {
        v.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        v
    }

    #[test]
    fn diagonal_eigenvalues() {
        let j = Matrix::diag(&[-1.0, -1000.0]);
        let d = eig_decompose(&j).unwrap();
        let ev = sorted(d.eigenvalues.clone());
        assert_eq!(ev, vec![Complex64::new(-1000.0, 0.0), Complex64::new(-1.0, 0.0)]);
    }

    #[test]
    fn lv_center_eigenvalues() {
        let j = Matrix::from_rows(&[&[0.0, 2.0], &[-1.0, 0.0]]);
        let ev = sorted(eig_decompose(&j).unwrap().eigenvalues);
        let r2 = 2f64.sqrt();
        assert!((ev[0] - Complex64::new(0.0, -r2)).norm() < 1e-14);
        assert!((ev[1] - Complex64::new(0.0, r2)).norm() < 1e-14);
    }

    #[test]
    fn repeated_eigenvalues_keep_independent_vectors() {
        let d = eig_decompose(&Matrix::identity(4).scaled(-3.0)).unwrap();
        assert!(d.inverse_residual() < 1e-12);
    }

    #[test]
    fn defective_matrix_is_rejected() {
        let j = Matrix::from_rows(&[&[1.0, 1.0], &[0.0, 1.0]]);
        assert!(matches!(eig_decompose(&j), Err(Error::Decomposition(_))));
    }

    #[test]
    fn random_matrices_reconstruct() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 2..=16 {
            for _ in 0..5 {
                let data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let j = Matrix::from_row_major(n, n, data);
                let d = eig_decompose(&j).unwrap();
                assert!(d.residual(&j) <= 1e-8 * j.frobenius_norm());
                assert!(d.inverse_residual() <= 1e-8);
            }
        }
    }

    #[test]
    fn scalar_decay_timescale() {
        let sys = SystemSpec::new("decay", StateDomain::linear(vec![(0.0, 1.0)]), true, |x, _t, o| {
            o[0] = -1000.0 * x[0]
        })
        .with_jacobian(|_x, _t| Matrix::from_rows(&[&[-1000.0]]));
        let r = tau_csp(&sys, &[0.5], 0.0, &CspConfig::default()).unwrap();
        assert_eq!(r.tau_csp, 1e-3);
        assert_eq!(r.split_index, 0);
        for mode in [TimeMode::Csp, TimeMode::LambdaMax] {
            let c = characteristic_time(&sys, &[0.5], 0.0, mode, &CspConfig::default()).unwrap();
            assert_eq!(c.value, 1e-3);
        }
    }

    #[test]
    fn lv_fixed_point_timescales() {
        let lv = LotkaVolterra::new();
        let r = tau_csp(&lv, &[2.0, 1.0], 0.0, &CspConfig::default()).unwrap();
        for ts in &r.timescales {
            assert!((ts - 0.5f64.sqrt()).abs() < 1e-12);
        }
        let c = characteristic_time(&lv, &[2.0, 1.0], 0.0, TimeMode::LambdaMax, &CspConfig::default()).unwrap();
        assert!((c.value - 0.5f64.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn exhausted_fast_mode_is_frozen() {
        // ω has no component along the fast direction
        let j = Matrix::diag(&[-1.0, -1e6]);
        let r = csp_analysis(&j, &[-0.5, 0.0], &[0.5, 0.0], &CspConfig::default()).unwrap();
        assert_eq!(r.split_index, 1);
        assert_eq!(r.tau_csp, 1.0);
        // an active fast mode blocks freezing
        let r = csp_analysis(&j, &[-0.5, -1e3], &[0.5, 1e-3], &CspConfig::default()).unwrap();
        assert_eq!(r.split_index, 0);
        assert_eq!(r.tau_csp, 1e-6);
    }

    #[test]
    fn zero_jacobian_gives_infinite_time() {
        let sys = SystemSpec::new("still", StateDomain::linear(vec![(0.0, 1.0); 2]), true, |_x, _t, o| {
            o[0] = 0.0;
            o[1] = 0.0;
        })
        .with_jacobian(|_x, _t| Matrix::zeros(2, 2));
        let c = characteristic_time(&sys, &[0.1, 0.2], 0.0, TimeMode::LambdaMax, &CspConfig::default()).unwrap();
        assert!(c.is_infinite());
    }

    #[test]
    fn identical_rows_fill_one_bin() {
        use crate::dataset::{Dataset, Provenance};
        let mut ds = Dataset::new(2, 0.1, true);
        for _ in 0..5 {
            ds.push(&[3.0, 2.0], None, &[0.0, 0.0], Provenance::Mc).unwrap();
        }
        let bins = LogBins::default();
        let h = timescale_histogram(&ds, &LotkaVolterra::new(), TimeMode::LambdaMax, &bins, &CspConfig::default()).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].occupied().len(), 1);
        assert_eq!(h[0].fractions().iter().sum::<f64>(), 1.0);
        let mut csv = Vec::new();
        write_histogram_csv(&mut csv, &h, &bins).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("step,bin_lo,bin_hi,fraction\n0,1e-14,"));
        assert_eq!(text.lines().count(), 1 + 41);
    }

    #[test]
    fn bins_clip_and_cover() {
        let b = LogBins::default();
        assert_eq!(b.index(1e-20), 0);
        assert_eq!(b.index(1e5), 39);
        assert_eq!(b.index(1e-14), 0);
        let e = b.edges();
        assert_eq!(e.len(), 41);
        assert!((e[40] - 1e2).abs() < 1e-10);
    }

    #[test]
    fn phi_limits() {
        assert_eq!(phi(Complex64::new(0.0, 0.0), 2.0), Complex64::new(2.0, 0.0));
        let l = Complex64::new(-3.0, 1.0);
        assert!((phi(l, f64::INFINITY) + 1.0 / l).norm() < 1e-15);
        let direct = ((l * 0.5).exp() - 1.0) / l;
        assert!((phi(l, 0.5) - direct).norm() < 1e-15);
    }
}
