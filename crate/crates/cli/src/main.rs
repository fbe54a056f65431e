//! `deepode` command-line driver.
//!
//! Every subcommand reads a TOML run configuration (`--config <file>` or
//! `--preset <name>`), honours `--seed`, writes CSV output and prints a
//! `key=value` report. The exit code is 0 only when every hard assertion of
//! the run holds; failed assertions exit with 1, errors with 2.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use deepode::config::{preset, RunConfig};
use deepode::csp::write_histogram_csv;
use deepode::dataset::{Dataset, FileFormat};
use deepode::dynamics::system_by_name;
use deepode::evalbench::{
    generate_dataset, measure_speedup, median, reference_trajectory, rollout_rmse, sampling_study, tau_study,
    timescale_coverage, unfiltered_chains, SamplingMethod, SpeedConfig, SweepRow,
};
use deepode::indicator::{hybrid_rollout, IndicatorModel};
use deepode::integrate::Trajectory;
use deepode::surrogate::{load_model, rollout_with_dt, save_model, train};

#[derive(Parser)]
#[command(name = "deepode", version, about = "EMCS sampling and neural surrogates for stiff ODEs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: lotka_volterra or ring_modulator.
    #[arg(long)]
    preset: Option<String>,
    /// Seed applied to every stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a training dataset.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// text or binary
        #[arg(long, default_value = "text")]
        format: FileFormat,
        /// Override the sampling method: emcs, mc or manifold.
        #[arg(long)]
        method: Option<String>,
    },
    /// Train a surrogate on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Autoregressive prediction with a trained model.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated initial state; the config's when absent.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
        #[arg(long)]
        steps: Option<usize>,
        /// Fall back to the integrator where the indicator score is low.
        #[arg(long)]
        hybrid: bool,
        #[arg(long)]
        threshold: Option<f64>,
        /// Training dataset for the indicator (required with --hybrid).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Also write the reference trajectory.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Characteristic-time histograms per EMCS step.
    CspHist {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Use this dataset instead of generating chains.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Sampling comparison and τ-schedule ablation.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// sampling, tau or all
        #[arg(long, default_value = "all")]
        what: String,
    },
    /// Surrogate against integrator wall-clock time per step.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Default)]
struct Report {
    lines: Vec<(String, String)>,
    asserts: Vec<(String, bool)>,
}

impl Report {
    fn kv(&mut self, k: &str, v: impl ToString) {
        self.lines.push((k.to_string(), v.to_string()));
    }

    fn check(&mut self, name: &str, ok: bool) {
        self.asserts.push((name.to_string(), ok));
    }

    fn passed(&self) -> bool {
        self.asserts.iter().all(|(_, ok)| *ok)
    }

    fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.lines {
            s.push_str(&format!("{k}={v}\n"));
        }
        for (k, ok) in &self.asserts {
            s.push_str(&format!("assert.{k}={}\n", if *ok { "pass" } else { "fail" }));
        }
        s.push_str(&format!("status={}\n", if self.passed() { "pass" } else { "fail" }));
        s
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match (&c.config, &c.preset) {
        (Some(p), _) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        (None, Some(name)) => preset(name)?,
        (None, None) => bail!("either --config or --preset is required"),
    };
    if let Some(s) = c.seed {
        cfg = cfg.with_seed(s);
    }
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn parse_method(s: &str) -> Result<SamplingMethod> {
    Ok(match s {
        "emcs" => SamplingMethod::Emcs,
        "mc" => SamplingMethod::Mc,
        "manifold" => SamplingMethod::Manifold,
        other => bail!("unknown sampling method {other:?}"),
    })
}

fn head(cfg: &RunConfig, cmd: &str) -> Report {
    let mut r = Report::default();
    r.kv("command", cmd);
    r.kv("system", &cfg.experiment.system);
    r.kv("seed", cfg.experiment.seed);
    r.kv("config_hash", cfg.experiment.hash());
    r
}

fn sample(c: &Common, out: &Path, format: FileFormat, method: Option<&str>) -> Result<Report> {
    let mut cfg = load_config(c)?;
    if let Some(m) = method {
        cfg.experiment.sampling = parse_method(m)?;
    }
    let sys = system_by_name(&cfg.experiment.system)?;
    let s = generate_dataset(&cfg.experiment, sys.as_ref())?;
    s.dataset.save(out, format)?;
    let mut r = head(&cfg, "sample");
    r.kv("sampling", cfg.experiment.sampling);
    r.kv("budget", cfg.experiment.budget);
    r.kv("rows", s.dataset.len());
    r.kv("failures", s.failures);
    r.kv("out", out.display());
    r.check("nonempty", !s.dataset.is_empty());
    r.check("within_budget", s.dataset.len() <= cfg.experiment.budget);
    Ok(r)
}

fn train_cmd(c: &Common, dataset: &Path, out: &Path, history: Option<&Path>) -> Result<Report> {
    let cfg = load_config(c)?;
    let ds = Dataset::load(dataset)?;
    let sys = system_by_name(&cfg.experiment.system)?;
    let mut tc = cfg.experiment.train.clone();
    tc.seed = cfg.experiment.seed;
    let (model, h) = train(&ds, &cfg.experiment.layer_sizes(&ds), &tc)?;
    let model = model.with_system(sys.as_ref())?;
    save_model(&model, out)?;
    if let Some(p) = history {
        let mut w = create(p)?;
        writeln!(w, "epoch,train_mae,val_mae,val_mae_raw")?;
        for e in 0..h.train_mae.len() {
            let v = |x: &Vec<f64>| x.get(e).map_or(String::new(), |v| format!("{v:e}"));
            writeln!(w, "{e},{:e},{},{}", h.train_mae[e], v(&h.val_mae), v(&h.val_mae_raw))?;
        }
    }
    let mut r = head(&cfg, "train");
    r.kv("rows", ds.len());
    r.kv("layers", format!("{:?}", model.mlp.sizes()));
    r.kv("epochs", h.train_mae.len());
    r.kv("final_train_mae", format!("{:e}", h.train_mae.last().copied().unwrap_or(f64::NAN)));
    if let Some(v) = h.val_mae.last() {
        r.kv("final_val_mae", format!("{v:e}"));
        r.kv("final_val_mae_raw", format!("{:e}", h.val_mae_raw.last().unwrap()));
    }
    r.kv("out", out.display());
    if h.train_mae.len() >= 20 {
        let n = h.train_mae.len();
        let first = median(&h.train_mae[..10]);
        let last = median(&h.train_mae[n - 10..]);
        r.kv("median_first10", format!("{first:e}"));
        r.kv("median_last10", format!("{last:e}"));
        r.check("loss_decreased", last < first);
    }
    Ok(r)
}

#[allow(clippy::too_many_arguments)]
fn rollout_cmd(
    c: &Common,
    model_path: &Path,
    out: &Path,
    x0: Option<Vec<f64>>,
    steps: Option<usize>,
    hybrid: bool,
    threshold: Option<f64>,
    dataset: Option<&Path>,
    reference_out: Option<&Path>,
) -> Result<Report> {
    let mut cfg = load_config(c)?;
    if let Some(x0) = x0 {
        cfg.experiment.rollout.x0 = x0;
    }
    if let Some(n) = steps {
        cfg.experiment.rollout.n_steps = n;
    }
    let e = &cfg.experiment;
    let model = load_model(model_path)?;
    let sys = system_by_name(&e.system)?;
    let (x0, t0, n) = (&e.rollout.x0, e.rollout.t0, e.rollout.n_steps);
    let mut r = head(&cfg, "rollout");
    let traj: Trajectory;
    if hybrid {
        let Some(ds) = dataset else {
            bail!("--hybrid needs --dataset to fit the indicator");
        };
        let ds = Dataset::load(ds)?;
        let ind = IndicatorModel::fit(&ds, &model.pre)?
            .with_threshold(threshold.unwrap_or(cfg.hybrid.threshold))?;
        model.check_dt(e.emcs.dt)?;
        let h = hybrid_rollout(&model, &ind, sys.as_ref(), &cfg.hybrid.integrator, x0, t0, n)?;
        let fb = h.fallback.clone();
        let extra = move |i: usize| if i > 0 && fb[i - 1] { "1".to_string() } else { "0".to_string() };
        h.trajectory.write_csv(create(out)?, Some(("fallback", &extra)))?;
        r.kv("threshold", ind.threshold);
        r.kv("fallback_fraction", h.fallback_fraction());
        r.kv("retries", h.retries);
        traj = h.trajectory;
    } else {
        let ro = rollout_with_dt(&model, e.emcs.dt, x0, t0, n)?;
        ro.trajectory.write_csv(create(out)?, None)?;
        r.kv("truncated_at", ro.truncated_at.map_or("none".into(), |j| j.to_string()));
        r.check("finite", ro.truncated_at.is_none());
        traj = ro.trajectory;
    }
    r.kv("steps", traj.len() - 1);
    let reference = reference_trajectory(e, sys.as_ref())?;
    if let Some(p) = reference_out {
        reference.write_csv(create(p)?, None)?;
    }
    let rmse = rollout_rmse(&traj, &reference)?;
    r.kv(
        "rmse_per_dim",
        rmse.per_dim.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(","),
    );
    r.kv("rmse_scalar", format!("{:e}", rmse.scalar));
    r.kv("out", out.display());
    Ok(r)
}

fn csp_hist(c: &Common, out: &Path, dataset: Option<&Path>) -> Result<Report> {
    let cfg = load_config(c)?;
    let e = &cfg.experiment;
    let h = &cfg.csp_hist;
    let sys = system_by_name(&e.system)?;
    let ds = match dataset {
        Some(p) => Dataset::load(p)?,
        None => unfiltered_chains(sys.as_ref(), h.n_roots, &h.tau, e.emcs.dt, e.seed, e.emcs.evolve_integrator)?,
    };
    let bins = h.bins.into();
    let cov = timescale_coverage(&ds, sys.as_ref(), h.mode.into(), &bins, &h.csp)?;
    write_histogram_csv(create(out)?, &cov.histograms, &bins)?;
    let mut r = head(&cfg, "csp-hist");
    r.kv("rows", ds.len());
    r.kv("steps", cov.histograms.len());
    r.kv("step0_bins", cov.step0_bins.len());
    r.kv("union_bins", cov.union_bins.len());
    r.kv(
        "consecutive_l1",
        cov.consecutive_l1.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(","),
    );
    r.kv("out", out.display());
    if cov.histograms.len() > 1 {
        r.check("union_strict_superset", cov.strict_superset());
        r.check("steps_distinct", cov.fraction_distinct(0.01) >= 0.5);
    }
    Ok(r)
}

fn row_csv(w: &mut impl Write, section: &str, seed: u64, extra: &str, row: &SweepRow) -> Result<()> {
    match &row.outcome {
        Ok(m) => writeln!(
            w,
            "{section},{},{seed},{extra},{},{:e},{:e},ok",
            row.label, m.rows, m.rollout_rmse_scalar, m.one_step_mae
        )?,
        Err(e) => writeln!(w, "{section},{},{seed},{extra},0,inf,inf,\"failed: {}\"", row.label, e.replace('"', "'"))?,
    }
    Ok(())
}

fn compare(c: &Common, out: &Path, what: &str) -> Result<Report> {
    let mut cfg = load_config(c)?;
    if let Some(s) = c.seed {
        // a single requested seed replaces the seed list
        cfg.compare.seeds = vec![s];
    }
    let mut r = head(&cfg, "compare");
    let mut w = create(out)?;
    writeln!(w, "section,label,seed,k,rows,rmse_scalar,one_step_mae,status")?;
    if what == "sampling" || what == "all" {
        let st = sampling_study(&cfg)?;
        for (seed, row) in &st.rows {
            row_csv(&mut w, "sampling", *seed, "", row)?;
        }
        for (m, v) in &st.medians {
            r.kv(&format!("sampling.median_rmse.{m}"), format!("{v:e}"));
        }
        r.check("emcs_best_median", st.emcs_wins());
    }
    if what == "tau" || what == "all" {
        let st = tau_study(&cfg)?;
        for (seed, row) in &st.strategies {
            row_csv(&mut w, "strategy", *seed, "", row)?;
        }
        for (seed, k, row) in &st.ablation {
            row_csv(&mut w, "ablation", *seed, &k.to_string(), row)?;
        }
        for (name, v) in &st.strategy_medians {
            r.kv(&format!("tau.median_rmse.{name}"), format!("{v:e}"));
        }
        for (k, v) in &st.k_medians {
            r.kv(&format!("tau.median_rmse.k{k}"), format!("{v:e}"));
        }
        r.check("rmse_nonincreasing_in_k", st.nonincreasing_in_k());
    }
    if !matches!(what, "sampling" | "tau" | "all") {
        bail!("--what must be sampling, tau or all");
    }
    r.kv("out", out.display());
    Ok(r)
}

fn bench(c: &Common, model_path: &Path, out: Option<&Path>) -> Result<Report> {
    let cfg = load_config(c)?;
    let e = &cfg.experiment;
    let b = &cfg.bench;
    let model = load_model(model_path)?;
    model.check_dt(e.emcs.dt)?;
    let sys = system_by_name(&e.system)?;
    let reference = reference_trajectory(e, sys.as_ref())?;
    let n = b.n_states.max(1);
    let stride = (reference.len() / n).max(1);
    let states: Vec<(Vec<f64>, f64)> = (0..n)
        .map(|i| {
            let j = (i * stride).min(reference.len() - 1);
            (reference.state(j).to_vec(), reference.times()[j])
        })
        .collect();
    let sp = measure_speedup(
        &model,
        sys.as_ref(),
        &b.integrator,
        &states,
        &SpeedConfig {
            repetitions: b.repetitions,
            warmup: b.warmup,
        },
    )?;
    let mut r = head(&cfg, "bench");
    r.kv("n_states", sp.n_states);
    r.kv("repetitions", sp.repetitions);
    r.kv("warmup", sp.warmup);
    r.kv("surrogate_step_s", format!("{:e}", sp.surrogate_step_s));
    r.kv("integrator_step_s", format!("{:e}", sp.integrator_step_s));
    r.kv("speedup", format!("{:.3}", sp.speedup));
    r.kv("min_speedup", b.min_speedup);
    if let Some(p) = out {
        let mut w = create(p)?;
        writeln!(w, "n_states,surrogate_step_s,integrator_step_s,speedup")?;
        writeln!(
            w,
            "{},{:e},{:e},{}",
            sp.n_states, sp.surrogate_step_s, sp.integrator_step_s, sp.speedup
        )?;
    }
    r.check("speedup", sp.speedup >= b.min_speedup);
    Ok(r)
}

fn run(cli: Cli) -> Result<(Report, Common)> {
    Ok(match cli.cmd {
        Cmd::Sample {
            common,
            out,
            format,
            method,
        } => (sample(&common, &out, format, method.as_deref())?, common),
        Cmd::Train {
            common,
            dataset,
            out,
            history,
        } => (train_cmd(&common, &dataset, &out, history.as_deref())?, common),
        Cmd::Rollout {
            common,
            model,
            out,
            x0,
            steps,
            hybrid,
            threshold,
            dataset,
            reference,
        } => (
            rollout_cmd(
                &common,
                &model,
                &out,
                x0,
                steps,
                hybrid,
                threshold,
                dataset.as_deref(),
                reference.as_deref(),
            )?,
            common,
        ),
        Cmd::CspHist { common, out, dataset } => (csp_hist(&common, &out, dataset.as_deref())?, common),
        Cmd::Compare { common, out, what } => (compare(&common, &out, &what)?, common),
        Cmd::Bench { common, model, out } => (bench(&common, &model, out.as_deref())?, common),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok((report, common)) => {
            let text = report.render();
            print!("{text}");
            if let Some(p) = &common.report {
                if let Err(e) = std::fs::write(p, &text) {
                    eprintln!("error: writing report {}: {e}", p.display());
                    return ExitCode::from(2);
                }
            }
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
