//! Fully connected network with GELU hidden layers and a linear output.
//!
//! All parameters live in one flat vector. Layer `l` stores its weight as a
//! row-major `fan_in × fan_out` block followed by its bias, so that
//! `z = a·W + b` for a row vector `a`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `0.5·x·(1 + erf(x/√2))`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// `Φ(x) + x·φ(x)`.
#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
        + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Reusable activation buffers for single-row inference.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    a: Vec<f64>,
    b: Vec<f64>,
}

/// Per-layer activations kept for backpropagation.
struct Tape {
    /// `inputs[l]` feeds layer `l`.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    fn check_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes need at least two positive entries, got {sizes:?}"
            )));
        }
        Ok(())
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        Self::check_sizes(sizes)?;
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count(sizes)],
        })
    }

    /// Kaiming-uniform weights, `U(−g·√(3/fan_in), g·√(3/fan_in))` with gain
    /// `√2` before GELU and 1 on the output layer; zero biases.
    pub fn kaiming_uniform(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut m = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = m.n_layers() - 1;
        for l in 0..m.n_layers() {
            let fan_in = m.sizes[l];
            let gain = if l == last { 1.0 } else { std::f64::consts::SQRT_2 };
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            let (w, _) = m.layer_range(l);
            for p in &mut m.params[w] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Ok(m)
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        Self::check_sizes(sizes)?;
        if params.len() != param_count(sizes) {
            return Err(Error::Dimension {
                expected: param_count(sizes),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Format("non-finite network parameter".into()));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn in_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.sizes.last().expect("sizes nonempty")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Flat ranges of layer `l`'s weight and bias.
    pub fn layer_range(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let off: usize = self.sizes[..=l].windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        (off..off + i * o, off + i * o..off + i * o + o)
    }

    pub fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let (w, _) = self.layer_range(l);
        ArrayView2::from_shape((self.sizes[l], self.sizes[l + 1]), &self.params[w]).expect("shape")
    }

    pub fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        let (_, b) = self.layer_range(l);
        ArrayView1::from(&self.params[b])
    }

    /// One row through the network. The summation order is fixed, so the
    /// result does not depend on batching.
    pub fn forward_row(&self, x: &[f64], out: &mut [f64], ws: &mut Workspace) {
        debug_assert_eq!(x.len(), self.in_dim());
        ws.a.clear();
        ws.a.extend_from_slice(x);
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w, b) = self.layer_range(l);
            let w = &self.params[w];
            ws.b.clear();
            ws.b.extend_from_slice(&self.params[b]);
            for k in 0..n_in {
                let ak = ws.a[k];
                let row = &w[k * n_out..(k + 1) * n_out];
                for (z, wk) in ws.b.iter_mut().zip(row) {
                    *z += ak * wk;
                }
            }
            if l != last {
                ws.b.iter_mut().for_each(|z| *z = gelu(*z));
            }
            std::mem::swap(&mut ws.a, &mut ws.b);
        }
        out.copy_from_slice(&ws.a);
    }

    /// Row-major batch; identical to calling [`Mlp::forward_row`] per row.
    pub fn forward_rows(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() / self.in_dim();
        let mut out = vec![0.0; n * self.out_dim()];
        let mut ws = Workspace::default();
        for (xi, oi) in x.chunks(self.in_dim()).zip(out.chunks_mut(self.out_dim())) {
            self.forward_row(xi, oi, &mut ws);
        }
        out
    }

    fn forward_tape(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, Tape) {
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.n_layers()),
            pre: Vec::with_capacity(self.n_layers() - 1),
        };
        let mut a = x.to_owned();
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let mut z = a.dot(&self.weight(l));
            z += &self.bias(l);
            tape.inputs.push(a);
            if l == last {
                return (z, tape);
            }
            a = z.mapv(gelu);
            tape.pre.push(z);
        }
        unreachable!("network has at least one layer")
    }

    /// Batched forward pass through matrix products; used in training.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.forward_tape(x).0
    }

    /// Mean absolute error over all entries of `y` and its gradient with
    /// respect to the flat parameter vector.
    pub fn loss_and_gradient(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> (f64, Vec<f64>) {
        let (pred, tape) = self.forward_tape(x);
        let count = (y.nrows() * y.ncols()) as f64;
        let diff = &pred - &y;
        let loss = diff.iter().map(|d| d.abs()).sum::<f64>() / count;
        let mut g = diff.mapv(|d| {
            if d > 0.0 {
                1.0 / count
            } else if d < 0.0 {
                -1.0 / count
            } else {
                0.0
            }
        });
        let mut grad = vec![0.0; self.params.len()];
        for l in (0..self.n_layers()).rev() {
            let (wr, br) = self.layer_range(l);
            let dw = tape.inputs[l].t().dot(&g);
            grad[wr].copy_from_slice(dw.as_slice().expect("standard layout"));
            let db: Array1<f64> = g.sum_axis(Axis(0));
            grad[br].copy_from_slice(db.as_slice().expect("contiguous"));
            if l > 0 {
                let mut back = g.dot(&self.weight(l).t());
                back.zip_mut_with(&tape.pre[l - 1], |b, z| *b *= gelu_derivative(*z));
                g = back;
            }
        }
        (loss, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_known_values() {
        assert_eq!(gelu(0.0), 0.0);
        // 0.5·(1 + erf(1/√2)) = Φ(1)
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        for x in [-3.0, -0.5, 0.2, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_derivative(x)).abs() < 1e-9);
        }
    }

    #[test]
    fn layout_and_identity_layer() {
        let mut m = Mlp::zeros(&[2, 2]).unwrap();
        m.params_mut()[..4].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let mut out = [0.0; 2];
        m.forward_row(&[0.3, -4.0], &mut out, &mut Workspace::default());
        assert_eq!(out, [0.3, -4.0]);
        assert_eq!(param_count(&[2, 8, 2]), 2 * 8 + 8 + 8 * 2 + 2);
    }

    #[test]
    fn batch_paths_agree() {
        let m = Mlp::kaiming_uniform(&[3, 16, 16, 2], 4).unwrap();
        let x = array![[0.1, -0.2, 0.3], [1.0, 2.0, -1.5], [0.0, 0.0, 0.0]];
        let rows = m.forward_rows(x.as_slice().unwrap());
        let gemm = m.forward_batch(x.view());
        for (a, b) in rows.iter().zip(gemm.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let m = Mlp::kaiming_uniform(&[2, 8, 2], 3).unwrap();
        let x = array![[0.3, -1.2], [1.5, 0.4], [-0.7, 0.9]];
        let y = array![[5.0, -5.0], [-4.0, 6.0], [3.0, 3.0]];
        let (_, g) = m.loss_and_gradient(x.view(), y.view());
        let h = 1e-6;
        for l in 0..m.n_layers() {
            let (wr, br) = m.layer_range(l);
            for range in [wr, br] {
                let (mut num, mut den) = (0.0f64, 0.0f64);
                for i in range {
                    let mut p = m.clone();
                    p.params_mut()[i] += h;
                    let up = p.loss_and_gradient(x.view(), y.view()).0;
                    p.params_mut()[i] -= 2.0 * h;
                    let dn = p.loss_and_gradient(x.view(), y.view()).0;
                    let fd = (up - dn) / (2.0 * h);
                    num += (fd - g[i]).powi(2);
                    den += g[i].powi(2);
                }
                assert!((num / den).sqrt() < 1e-4, "layer {l}: {}", (num / den).sqrt());
            }
        }
    }
}
