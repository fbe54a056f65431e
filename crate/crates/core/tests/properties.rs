use proptest::prelude::*;

use deepode::csp::{characteristic_time, tau_csp, CspConfig, LogBins, TimeMode};
use deepode::dataset::{Dataset, Provenance};
use deepode::dynamics::{eval_rhs, RingModulator, StateDomain, SystemSpec};
use deepode::emcs::{filter_by_range, RangeEstimate};
use deepode::evalbench::{relative_errors, rollout_rmse, spearman};
use deepode::indicator::IndicatorModel;
use deepode::integrate::{advance, IntegratorConfig, Method, Trajectory};
use deepode::linalg::Matrix;
use deepode::surrogate::preprocess::inverse_box_cox;
use deepode::surrogate::{box_cox, read_model, write_model, Mlp, MlpModel, Preprocessor};

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, -1.0..1.0f64, Just(0.0), Just(-0.0), Just(1e-300), Just(-3.5e-200)]
}

fn rows(dim: usize, autonomous: bool) -> impl Strategy<Value = Vec<(Vec<f64>, f64, Vec<f64>, u32)>> {
    let row = (
        prop::collection::vec(finite(), dim),
        0.0..1e-3f64,
        prop::collection::vec(finite(), dim),
        0u32..5,
    );
    prop::collection::vec(row, 0..20).prop_map(move |mut v| {
        if autonomous {
            v.iter_mut().for_each(|r| r.1 = 0.0);
        }
        v
    })
}

fn build(dim: usize, autonomous: bool, rows: &[(Vec<f64>, f64, Vec<f64>, u32)]) -> Dataset {
    let mut ds = Dataset::new(dim, 1e-6, autonomous);
    for (x, t, u, p) in rows {
        let prov = match p {
            0 => Provenance::Mc,
            1 => Provenance::Manifold,
            k => Provenance::Evolution(*k - 1),
        };
        let t = if autonomous { None } else { Some(*t) };
        ds.push(x, t, u, prov).unwrap();
    }
    ds
}

fn diag_system(a: f64, b: f64) -> SystemSpec {
    SystemSpec::new("diag", StateDomain::linear(vec![(-1.0, 1.0); 2]), true, move |x, _, out| {
        out[0] = a * x[0];
        out[1] = b * x[1];
    })
    .with_jacobian(move |_, _| Matrix::diag(&[a, b]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn text_and_binary_round_trips_are_exact(
        (auto, dim, rows) in (any::<bool>(), 1usize..4)
            .prop_flat_map(|(auto, dim)| (Just(auto), Just(dim), rows(dim, auto)))
    ) {
        let ds = build(dim, auto, &rows);
        let mut text = Vec::new();
        ds.write_text(&mut text).unwrap();
        prop_assert_eq!(&Dataset::read_text(&text[..]).unwrap(), &ds);
        let mut bin = Vec::new();
        ds.write_binary(&mut bin).unwrap();
        prop_assert_eq!(&Dataset::read_binary(&bin[..]).unwrap(), &ds);
    }

    #[test]
    fn box_cox_inverts(x in 1e-8..1e8f64, lambda in 0.05..1.0f64) {
        let y = box_cox(x, lambda);
        let back = inverse_box_cox(y, lambda);
        prop_assert!((back - x).abs() <= 1e-9 * x);
    }

    #[test]
    fn score_is_a_probability_and_peaks_at_mu(
        mu in prop::collection::vec(-5.0..5.0f64, 1..6),
        sig in prop::collection::vec(0.1..3.0f64, 6),
        y in prop::collection::vec(-10.0..10.0f64, 6),
    ) {
        let d = mu.len();
        let ind = IndicatorModel { mu: mu.clone(), sigma: sig[..d].to_vec(), threshold: 0.5 };
        let s = ind.score(&y[..d]);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(ind.score(&mu), 1.0);
        // reversing every dimension leaves the score unchanged
        let rev = IndicatorModel {
            mu: mu.iter().rev().cloned().collect(),
            sigma: sig[..d].iter().rev().cloned().collect(),
            threshold: 0.5,
        };
        let yr: Vec<f64> = y[..d].iter().rev().cloned().collect();
        prop_assert!((rev.score(&yr) - s).abs() <= 1e-15);
        // an affine change of units absorbed into mu and sigma
        let aff = IndicatorModel {
            mu: mu.iter().map(|m| 3.0 * m - 1.0).collect(),
            sigma: sig[..d].iter().map(|s| 3.0 * s).collect(),
            threshold: 0.5,
        };
        let ya: Vec<f64> = y[..d].iter().map(|v| 3.0 * v - 1.0).collect();
        prop_assert!((aff.score(&ya) - s).abs() <= 1e-12);
    }

    #[test]
    fn filtered_labels_lie_in_the_widened_box(
        labels in prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64), 1..200),
        lo in -1.0..0.0f64, hi in 0.0..1.0f64,
        l1 in 0.1..3.0f64, l2 in 0.1..3.0f64,
    ) {
        let mut ds = Dataset::new(2, 0.1, true);
        for (a, b) in &labels {
            ds.push(&[0.0, 0.0], None, &[*a, *b], Provenance::Mc).unwrap();
        }
        let range = RangeEstimate {
            x_lo: vec![0.0; 2], x_hi: vec![1.0; 2],
            u_lo: vec![lo; 2], u_hi: vec![hi; 2],
            n_trajectories: 1, dt: 0.1,
        };
        let out = filter_by_range(&ds, &range, l1, l2).unwrap();
        let bounds = range.label_bounds(l1, l2);
        for i in 0..out.len() {
            for (v, (a, b)) in out.label(i).iter().zip(&bounds) {
                prop_assert!(a <= v && v <= b);
            }
        }
        prop_assert!(bounds.iter().all(|(a, b)| *a <= lo && *b >= hi));
        prop_assert_eq!(filter_by_range(&out, &range, l1, l2).unwrap(), out);
    }

    #[test]
    fn log_bins_are_monotone(a in 1e-16..1e4f64, b in 1e-16..1e4f64) {
        let bins = LogBins::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(bins.index(lo) <= bins.index(hi));
        prop_assert!(bins.index(hi) < bins.n);
    }

    #[test]
    fn rmse_of_identity_and_offset(vals in prop::collection::vec(-5.0..5.0f64, 4..40), c in -2.0..2.0f64) {
        let mut a = Trajectory::new(2);
        let mut b = Trajectory::new(2);
        for (i, v) in vals.iter().enumerate() {
            a.push(i as f64 * 0.1, &[*v, v.sin()]);
            b.push(i as f64 * 0.1, &[*v + c, v.sin()]);
        }
        let same = rollout_rmse(&a, &a).unwrap();
        prop_assert!(same.per_dim.iter().all(|v| *v == 0.0));
        let off = rollout_rmse(&b, &a).unwrap();
        prop_assert!((off.per_dim[0] - c.abs()).abs() <= 1e-12);
        prop_assert!(off.per_dim[1] == 0.0);
    }

    #[test]
    fn spearman_ignores_monotone_transforms(v in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 3..50)) {
        let (x, y): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let r = spearman(&x, &y).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        let xe: Vec<f64> = x.iter().map(|a| a.exp()).collect();
        prop_assert!((spearman(&xe, &y).unwrap() - r).abs() <= 1e-12);
    }

    #[test]
    fn relative_errors_are_nonnegative(p in prop::collection::vec(-1.0..1.0f64, 1..20), s in -1.0..1.0f64) {
        let r: Vec<f64> = p.iter().map(|v| v + s).collect();
        prop_assert!(relative_errors(&p, &r).iter().all(|e| *e >= 0.0 && e.is_finite()));
    }

    #[test]
    fn backward_euler_never_amplifies(re in -1e4..-1e-3f64, h in 1e-6..10.0f64, y0 in -1.0..1.0f64) {
        let sys = diag_system(re, re);
        let cfg = IntegratorConfig::fixed(Method::BackwardEuler, h);
        let y1 = advance(&sys, &[y0, y0], 0.0, h, &cfg).unwrap();
        prop_assert!(y1[0].abs() <= y0.abs());
    }

    #[test]
    fn lambda_max_time_within_spectrum(a in -1e4..-1e-2f64, b in -1e4..-1e-2f64, x in -1.0..1.0f64) {
        let sys = diag_system(a, b);
        let cfg = CspConfig::default();
        let lm = characteristic_time(&sys, &[x, 0.5], 0.0, TimeMode::LambdaMax, &cfg).unwrap().value;
        let r = tau_csp(&sys, &[x, 0.5], 0.0, &cfg).unwrap();
        let (lo, hi) = (r.timescales[0], *r.timescales.last().unwrap());
        prop_assert!(lo * (1.0 - 1e-12) <= lm && lm <= hi * (1.0 + 1e-12));
    }

    #[test]
    fn looser_tol_abs_never_shortens_tau_csp(a in -1e5..-1.0f64, x0 in 1e-6..1.0f64, x1 in 1e-6..1.0f64, e in -12i32..-2) {
        let sys = diag_system(a, -0.5);
        let tight = tau_csp(&sys, &[x0, x1], 0.0, &CspConfig::new(1e-4, 10f64.powi(e))).unwrap();
        let loose = tau_csp(&sys, &[x0, x1], 0.0, &CspConfig::new(1e-4, 10f64.powi(e + 2))).unwrap();
        prop_assert!(loose.tau_csp >= tight.tau_csp);
    }

    #[test]
    fn modulator_rhs_has_the_forcing_period(
        y in prop::collection::vec(-0.05..0.05f64, 15),
        t in 0.0..1e-3f64,
    ) {
        let sys = RingModulator::new();
        let a = eval_rhs(&sys, &y, t).unwrap();
        let b = eval_rhs(&sys, &y, t + RingModulator::PERIOD).unwrap();
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let d = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        prop_assert!(d < 1e-9 * na + 1e-12);
    }

    #[test]
    fn model_files_and_batches_are_bit_exact(seed in any::<u64>(), inputs in prop::collection::vec(-3.0..3.0f64, 3 * 10)) {
        let mlp = Mlp::kaiming_uniform(&[3, 7, 5, 2], seed).unwrap();
        let mut pre = Preprocessor::identity(3, 2);
        pre.input_mean = vec![0.1, -0.2, 0.3];
        pre.label_std = vec![2.0, 0.5];
        let model = MlpModel::new(mlp, pre, 1e-6, false, seed).unwrap();
        let mut buf = Vec::new();
        write_model(&model, &mut buf).unwrap();
        let back = read_model(&buf[..]).unwrap();
        let batch = model.forward_batch(&inputs).unwrap();
        for (i, row) in inputs.chunks(3).enumerate() {
            let a = model.forward(row).unwrap();
            let b = back.forward(row).unwrap();
            prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(&a[..], &batch[2 * i..2 * i + 2]);
        }
    }
}
