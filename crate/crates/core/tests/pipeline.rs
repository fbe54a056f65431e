use deepode::config::{preset, RunConfig};
use deepode::evalbench::{
    compare_sampling, compare_tau_strategies, run_experiment, ExperimentConfig, SamplingMethod,
};
use deepode::emcs::TauSchedule;

fn tiny() -> ExperimentConfig {
    let mut c = preset("lotka_volterra").unwrap().experiment;
    c.budget = 400;
    c.range.n_seeds = 4;
    c.hidden = vec![16, 16];
    c.train.epochs = 3;
    c.train.batch_size = 32;
    c.rollout.n_steps = 50;
    c.manifold.n_per_traj = 100;
    c
}

#[test]
fn experiments_are_reproducible_from_config_and_seed() {
    let cfg = tiny();
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.dataset, b.dataset);
    assert_eq!(a.history, b.history);
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.metrics.rows, 400);
    assert_eq!(a.metrics.config_hash, cfg.hash());
    assert_eq!(a.rollout.trajectory.len(), 51);

    let other = run_experiment(&cfg.clone().with_seed(1)).unwrap();
    assert_ne!(a.dataset, other.dataset);
}

#[test]
fn report_lists_every_metric() {
    let r = run_experiment(&tiny()).unwrap();
    let kv = r.metrics.to_kv("x.");
    for key in ["x.rows=", "x.rollout_rmse_scalar=", "x.one_step_mae=", "x.config_hash="] {
        assert!(kv.contains(key), "missing {key} in\n{kv}");
    }
}

#[test]
fn unequal_budgets_are_rejected_before_training() {
    let a = tiny();
    let mut b = tiny().with_sampling(SamplingMethod::Manifold);
    b.budget = 500;
    assert!(compare_sampling(&[a, b]).is_err());
}

#[test]
fn zero_evolution_steps_reproduce_the_mc_pipeline() {
    let base = tiny();
    let inc = TauSchedule::increasing(vec![0.1, 0.2]);
    let cmp = compare_tau_strategies(&base, &[], &inc, &[0]).unwrap();
    let mc = run_experiment(&base.clone().with_sampling(SamplingMethod::Mc)).unwrap();
    let (k, row) = &cmp.ablation[0];
    assert_eq!(*k, 0);
    assert_eq!(row.outcome.as_ref().unwrap(), &mc.metrics);
}

#[test]
fn run_config_round_trips_through_toml() {
    for name in ["lotka_volterra", "ring_modulator"] {
        let cfg = preset(name).unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }
    assert!(RunConfig::from_toml("system = \"lotka_volterra\"\nbudget = 0\n").is_err());
}
