//! Rollout and one-step error metrics.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::csp::LogBins;
use crate::error::{Error, Result};
use crate::integrate::Trajectory;

/// Floor added to `|u|` in relative errors.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Rmse {
    pub per_dim: Vec<f64>,
    /// Mean over dimensions of the RMSE divided by the reference std.
    pub scalar: f64,
    /// Number of shared time points.
    pub n_points: usize,
}

/// Matches the times of `pred` and `reference`; both must be increasing.
fn shared_rows(pred: &Trajectory, reference: &Trajectory) -> Vec<(usize, usize)> {
    let (tp, tr) = (pred.times(), reference.times());
    let scale = tr.iter().chain(tp).fold(0.0f64, |m, t| m.max(t.abs())).max(f64::MIN_POSITIVE);
    let tol = 1e-9 * scale;
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < tp.len() && j < tr.len() {
        let d = tp[i] - tr[j];
        if d.abs() <= tol {
            out.push((i, j));
            i += 1;
            j += 1;
        } else if d < 0.0 {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// Per-dimension RMSE over the times both trajectories share.
pub fn rollout_rmse(pred: &Trajectory, reference: &Trajectory) -> Result<Rmse> {
    if pred.dim() != reference.dim() {
        return Err(Error::Dimension {
            expected: reference.dim(),
            got: pred.dim(),
        });
    }
    let rows = shared_rows(pred, reference);
    if rows.is_empty() {
        return Err(Error::Alignment("trajectories share no time points".into()));
    }
    let n = rows.len() as f64;
    let d = pred.dim();
    let mut per_dim = vec![0.0; d];
    let mut mean = vec![0.0; d];
    for &(i, j) in &rows {
        let (p, r) = (pred.state(i), reference.state(j));
        for k in 0..d {
            per_dim[k] += (p[k] - r[k]).powi(2);
            mean[k] += r[k] / n;
        }
    }
    let mut var = vec![0.0; d];
    for &(_, j) in &rows {
        for k in 0..d {
            var[k] += (reference.state(j)[k] - mean[k]).powi(2) / n;
        }
    }
    per_dim.iter_mut().for_each(|v| *v = (*v / n).sqrt());
    let scalar = per_dim
        .iter()
        .zip(&var)
        .map(|(e, v)| e / v.sqrt().max(crate::surrogate::preprocess::STD_FLOOR))
        .sum::<f64>()
        / d as f64;
    Ok(Rmse {
        per_dim,
        scalar,
        n_points: rows.len(),
    })
}

/// `|û − u| / (|u| + ε)` per component, flattened.
pub fn relative_errors(pred: &[f64], truth: &[f64]) -> Vec<f64> {
    pred.iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs() / (t.abs() + REL_ERROR_FLOOR))
        .collect()
}

/// Fractions of `values` per log bin; zeros and values below `lo` land in
/// the first bin, values above `hi` in the last.
pub fn log_histogram(values: &[f64], bins: &LogBins) -> Vec<f64> {
    let mut counts = vec![0usize; bins.n];
    for &v in values {
        counts[bins.index(v)] += 1;
    }
    let total = values.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / total).collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::Config("correlation needs at least two points".into()));
    }
    Ok(pearson(&ranks(a), &ranks(b)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumPeak {
    /// Index of the strongest non-DC bin.
    pub bin: usize,
    pub frequency: f64,
    pub magnitude: f64,
    /// Bin width `1/(n·dt)`.
    pub resolution: f64,
}

/// Strongest non-DC component of a uniformly sampled, mean-removed signal.
pub fn dominant_frequency(signal: &[f64], dt: f64) -> Result<SpectrumPeak> {
    let n = signal.len();
    if n < 4 {
        return Err(Error::Config("spectrum needs at least four samples".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::Config(format!("sample spacing must be positive, got {dt}")));
    }
    let mean = signal.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let (bin, magnitude) = buf[1..=n / 2]
        .iter()
        .enumerate()
        .map(|(k, c)| (k + 1, c.norm()))
        .fold((1, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
    let resolution = 1.0 / (n as f64 * dt);
    Ok(SpectrumPeak {
        bin,
        frequency: bin as f64 * resolution,
        magnitude,
        resolution,
    })
}

/// 64-bit FNV-1a of `text`, as 16 hex digits.
pub fn config_hash(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(times: &[f64], xs: &[f64]) -> Trajectory {
        let mut t = Trajectory::new(1);
        for (a, b) in times.iter().zip(xs) {
            t.push(*a, &[*b]);
        }
        t
    }

    #[test]
    fn rmse_offset_and_identity() {
        let r = traj(&[0.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(rollout_rmse(&r, &r).unwrap().scalar, 0.0);
        let p = traj(&[0.0, 1.0, 2.0, 3.0], &[1.5, 2.5, 3.5, 4.5]);
        assert!((rollout_rmse(&p, &r).unwrap().per_dim[0] - 0.5).abs() < 1e-15);
        let q = traj(&[10.0, 11.0], &[0.0, 0.0]);
        assert!(matches!(rollout_rmse(&q, &r), Err(Error::Alignment(_))));
    }

    #[test]
    fn rmse_of_sine_against_zero() {
        let n = 20_000;
        let times: Vec<f64> = (0..n).map(|i| i as f64 * 1e-3).collect();
        let xs: Vec<f64> = times.iter().map(|t| 3.0 * (2.0 * std::f64::consts::PI * t).sin()).collect();
        let zero = traj(&times, &vec![0.0; n]);
        let rmse = rollout_rmse(&zero, &traj(&times, &xs)).unwrap().per_dim[0];
        assert!((rmse - 3.0 / 2f64.sqrt()).abs() < 1e-3);
    }

    #[test]
    fn spearman_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 100.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        // ranks (1, 2.5, 2.5, 4) against (1, 2, 3, 4)
        let r = spearman(&[1.0, 5.0, 5.0, 9.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r - 0.948_683_298_050_513_8).abs() < 1e-12);
    }

    #[test]
    fn dominant_bin_of_pure_tone() {
        let dt = 1e-6;
        let n = 1000;
        let s: Vec<f64> = (0..n).map(|i| 0.3 + (2.0 * std::f64::consts::PI * 7e3 * i as f64 * dt).cos()).collect();
        let p = dominant_frequency(&s, dt).unwrap();
        assert_eq!(p.bin, 7);
        assert!((p.frequency - 7e3).abs() < 1e-6);
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(config_hash(""), "cbf29ce484222325");
        assert_eq!(config_hash("a"), "af63dc4c8601ec8c");
    }
}
