//! The `flatmin` command line.

use std::ffi::OsString;
use std::fs::File;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use flatmin_core::analysis::{
    ge_bound_lpf, ge_bound_sgd, ge_ratio, kendall_pair_counts, GeBoundInputs,
};
use flatmin_core::landscape::{run_sweep as landscape_sweep, SweepRow};
use flatmin_core::models::{balance, build_mlp, Checkpoint};
use flatmin_core::optimizers::{
    gamma_schedule, lpf_sgd_step, msgd_step, LpfConfig, SigmaMode, StepContext,
};
use flatmin_core::sharpness::{compute_measures, lanczos_spectrum, lpf_measure};
use flatmin_core::{rng, MlpObjective, OptimizerState, ParamVector, QuadraticLandscape};
use rand::Rng;
use rayon::prelude::*;

use crate::config::{Config, LandscapeSpec, TheorySpec};
use crate::error::{HarnessError, Result};
use crate::report::{Format, OutputDir, Table};
use crate::sweep::{
    effective_seed, measures_table, run_sweep, runs_table, step_log_table, write_sweep,
};
use crate::train::{build_network, prepare_data, run_measure_config, train_to_threshold};

#[derive(Debug, Parser)]
#[command(
    name = "flatmin",
    version,
    about = "Smoothed training and sharpness measures for small dense networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Experiment file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed; each listed run seed is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Output directory (defaults to `run.output_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration for every listed seed.
    Train,
    /// Evaluate the configured measures on a checkpoint.
    Measure {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Checkpoint of the initialization; rebuilt from the seed if absent.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Train every point of the configured sweep axis for every seed.
    Sweep,
    /// Quadratic landscape sweeps against closed-form oracles.
    Landscape,
    /// Generalization-bound ratio tables.
    Theory,
    /// Fast oracle self-tests.
    Check,
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(manifest_dir) => {
            println!("{}", manifest_dir.join("manifest.json").display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    match &cli.config {
        Some(p) => Config::from_path(p),
        None => Config::parse(""),
    }
}

fn out_dir(cli: &Cli, cfg: &Config) -> PathBuf {
    cli.out
        .clone()
        .unwrap_or_else(|| cfg.experiment.output_dir.clone())
}

/// Runs a parsed command and returns its output directory.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let cfg = load_config(cli)?;
    let dir = out_dir(cli, &cfg);
    let name = match cli.command {
        Command::Train => "train",
        Command::Measure { .. } => "measure",
        Command::Sweep => "sweep",
        Command::Landscape => "landscape",
        Command::Theory => "theory",
        Command::Check => "check",
    };
    let mut out = OutputDir::create(&dir, name, cli.seed, cli.format)?;
    out.manifest.config_hash = Some(cfg.experiment.hash());
    if let Some(p) = &cli.config {
        let text = std::fs::read(p).map_err(|e| HarnessError::io(p, e))?;
        out.file("config.txt", "config", &text)?;
    }
    let result = match &cli.command {
        Command::Train => train(&cfg, cli.seed, &mut out),
        Command::Measure { checkpoint, init } => {
            measure(&cfg, cli.seed, checkpoint, init.as_deref(), &mut out)
        }
        Command::Sweep => {
            let mut outcome = run_sweep(&cfg, cli.seed)?;
            write_sweep(&mut out, &mut outcome)
        }
        Command::Landscape => landscape(cfg.landscape.clone(), cli.seed, &mut out),
        Command::Theory => theory(&cfg.theory.clone().unwrap_or_default(), &mut out),
        Command::Check => check(cli.seed, &mut out),
    };
    // the manifest is written even when the command failed part way
    out.finish()?;
    result.map(|_| dir)
}

fn train(cfg: &Config, master: u64, out: &mut OutputDir) -> Result<()> {
    let e = &cfg.experiment;
    let outcomes: Vec<_> = e
        .seeds
        .par_iter()
        .map(|&s| train_to_threshold(e, effective_seed(master, s), &format!("s{s}")))
        .collect::<Result<_>>()?;
    let mut records = Vec::new();
    for o in outcomes {
        let mut rec = o.record;
        let log = step_log_table(&o.step_log).render(out.format());
        rec.step_log = Some(out.file(
            &format!("logs/{}.{}", rec.run_id, out.format().extension()),
            "step_log",
            log.as_bytes(),
        )?);
        let mut ckpt = Vec::new();
        Checkpoint::new(&o.model, &o.params).write_to(&mut ckpt)?;
        out.file(
            &format!("checkpoints/{}.json", rec.run_id),
            "checkpoint",
            &ckpt,
        )?;
        let mut init = Vec::new();
        Checkpoint::new(&o.model, &o.init).write_to(&mut init)?;
        out.file(
            &format!("checkpoints/{}_init.json", rec.run_id),
            "checkpoint",
            &init,
        )?;
        if !rec.converged {
            out.warn(format!(
                "run {} did not converge: {}",
                rec.run_id,
                rec.failure.as_deref().unwrap_or("loss above threshold")
            ));
        }
        out.manifest.run_ids.push(rec.run_id.clone());
        records.push(rec);
    }
    out.table("runs", "runs", &runs_table(&records))?;
    out.table("measures", "measures", &measures_table(&records))?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<(flatmin_core::Model, ParamVector)> {
    let f = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(Checkpoint::read_from(f)?.restore()?)
}

fn measure(
    cfg: &Config,
    master: u64,
    checkpoint: &Path,
    init: Option<&Path>,
    out: &mut OutputDir,
) -> Result<()> {
    let e = &cfg.experiment;
    let seed = effective_seed(master, e.seeds[0]);
    let (model, params) = read_checkpoint(checkpoint)?;
    let (train, _) = prepare_data(e, seed)?;
    let init = match init {
        Some(p) => read_checkpoint(p)?.1,
        None => build_network(e, &train, seed)?.1,
    };
    if init.len() != params.len() {
        return Err(HarnessError::config(
            "initialization does not match the checkpoint architecture",
        ));
    }
    let (balanced, report) = balance(&model, &params)?;
    let reports = compute_measures(
        &model,
        &balanced,
        &init,
        &train.to_batch(),
        &run_measure_config(&e.measures, seed),
        &train.provenance.source,
    )?;
    let mut t = Table::new(flatmin_core::sharpness::MeasureReport::CSV_HEADER);
    reports
        .iter()
        .for_each(|m| t.push_line(&m.csv_row("measure")));
    out.table("measures", "measures", &t)?;
    out.file(
        "balance.json",
        "balance_report",
        serde_json::to_string_pretty(&report)
            .expect("report serializes")
            .as_bytes(),
    )?;
    Ok(())
}

fn landscape(spec: Option<LandscapeSpec>, seed: u64, out: &mut OutputDir) -> Result<()> {
    let spec = spec.unwrap_or_else(|| {
        Config::parse("landscape.kind = mean_scaled\n")
            .unwrap()
            .landscape
            .unwrap()
    });
    let rows = landscape_sweep(spec.kind, &spec.values, &spec.estimators, seed)?;
    let mut t = Table::new(SweepRow::CSV_HEADER);
    rows.iter().for_each(|r| t.push_line(&r.csv_row()));
    out.table("landscape", "landscape_sweep", &t)?;
    Ok(())
}

/// The ratio grid over `σ × T`, with both bounds and the thresholds.
pub fn theory_table(spec: &TheorySpec) -> Result<Table> {
    let mut t = Table::new("alpha,beta,c,sigma,T,p,p_hat,collapsed,rho,ratio_threshold,sigma_threshold,bound_sgd,bound_lpf");
    for &sigma in &spec.sigmas {
        for &steps in &spec.steps {
            let inp = GeBoundInputs {
                alpha_lip: spec.alpha,
                beta_smooth: spec.beta,
                c: spec.c,
                t: steps,
                sigma,
            };
            let r = ge_ratio(&inp)?;
            t.push(vec![
                spec.alpha.to_string(),
                spec.beta.to_string(),
                spec.c.to_string(),
                sigma.to_string(),
                steps.to_string(),
                r.p.to_string(),
                r.p_hat.to_string(),
                r.collapsed.to_string(),
                r.rho.to_string(),
                inp.ratio_threshold().to_string(),
                inp.sigma_monotone_threshold().to_string(),
                ge_bound_sgd(&inp, spec.m)?.to_string(),
                ge_bound_lpf(&inp, spec.m)?.to_string(),
            ]);
        }
    }
    Ok(t)
}

fn theory(spec: &TheorySpec, out: &mut OutputDir) -> Result<()> {
    out.table("theory", "ge_ratio", &theory_table(spec)?)?;
    Ok(())
}

type CheckFn = fn(u64) -> Result<(bool, String)>;

fn check_gamma(_: u64) -> Result<(bool, String)> {
    let a = gamma_schedule(0, 100, 0.5, 3.0)?;
    let b = gamma_schedule(100, 100, 0.5, 3.0)?;
    Ok((
        a == 0.5 && b == 2.0,
        format!("gamma(0) = {a}, gamma(T) = {b}"),
    ))
}

fn check_lpf_closed_form(seed: u64) -> Result<(bool, String)> {
    let land = QuadraticLandscape::<f64>::new((1..=20).map(f64::from).collect(), seed)?;
    let exact = 0.01 * 210.0 / 2.0;
    let est = lpf_measure(&land, &land.minimizer(), 0.1, 20_000, seed)?;
    Ok((
        (est - exact).abs() <= 0.05 * exact,
        format!("{est} vs {exact}"),
    ))
}

fn check_lpf_reduction(seed: u64) -> Result<(bool, String)> {
    let mut s = rng::stream(seed, &[1]);
    let x: Vec<f64> = rng::standard_normal_vec(&mut s, 40 * 3);
    let labels = (0..40).map(|i| usize::from(x[3 * i] > 0.0)).collect();
    let data = flatmin_core::Batch::new(flatmin_core::Matrix::from_vec(40, 3, x)?, labels, 2)?;
    let (model, p) = build_mlp::<f64>(&[3, 6, 2], seed)?;
    let obj = MlpObjective::new(&model, &data);
    let mut a = OptimizerState::new(p, 0.1, 0.9, 0.0)?;
    let mut b = a.clone();
    let cfg = LpfConfig {
        gamma0: 0.0,
        alpha: 0.0,
        mc_splits: 4,
        total_steps: 30,
        sigma_mode: SigmaMode::Norm,
    };
    let all: Vec<usize> = (0..40).collect();
    for e in 0..30 {
        msgd_step(&mut a, &obj, &all)?;
        lpf_sgd_step(&mut b, &obj, &all, &cfg, StepContext { seed, epoch: e })?;
    }
    let d = a
        .params
        .values()
        .iter()
        .zip(b.params.values())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    Ok((d <= 1e-12, format!("max difference {d:e}")))
}

fn check_balance(seed: u64) -> Result<(bool, String)> {
    let (model, mut p) = build_mlp::<f64>(&[4, 8, 8, 3], seed)?;
    p.values_mut()[..4].iter_mut().for_each(|v| *v *= 50.0);
    let (b, r) = balance(&model, &p)?;
    let hidden = &r.per_filter_norms_after[..16];
    let norm_err = hidden.iter().fold(0.0f64, |m, n| m.max((n - 1.0).abs()));
    let (b2, _) = balance(&model, &b)?;
    let ok = r.max_output_deviation <= 1e-9 && norm_err <= 1e-9 && b2 == b;
    Ok((
        ok,
        format!(
            "output deviation {:e}, norm error {norm_err:e}",
            r.max_output_deviation
        ),
    ))
}

fn check_kendall(seed: u64) -> Result<(bool, String)> {
    let mut s = rng::stream(seed, &[2]);
    let x: Vec<f64> = (0..200)
        .map(|_| f64::from(s.random_range(0..20u8)))
        .collect();
    let y: Vec<f64> = (0..200)
        .map(|_| f64::from(s.random_range(0..20u8)))
        .collect();
    let c = kendall_pair_counts(&x, &y)?;
    let mut brute = 0i64;
    for i in 0..200 {
        for j in i + 1..200 {
            brute += (x[i].total_cmp(&x[j]) as i64) * (y[i].total_cmp(&y[j]) as i64);
        }
    }
    Ok((c.score == brute, format!("S = {} vs {brute}", c.score)))
}

fn check_lanczos(seed: u64) -> Result<(bool, String)> {
    let land =
        QuadraticLandscape::<f64>::new((1..=30).map(|i| f64::from(i) * 0.5).collect(), seed)?;
    let spec = lanczos_spectrum(&land, &land.minimizer(), 30, seed)?;
    let top = spec.ritz_values[0];
    Ok(((top - 15.0).abs() <= 1e-8, format!("lambda_max {top}")))
}

fn check_ge_ratio(_: u64) -> Result<(bool, String)> {
    let inp = GeBoundInputs {
        alpha_lip: 1.0,
        beta_smooth: 10.0,
        c: 1.0,
        t: 1e4,
        sigma: 0.05,
    };
    let collapsed = ge_ratio(&inp)?.rho;
    let smoothed = ge_ratio(&GeBoundInputs {
        sigma: 1.0,
        t: 1e6,
        ..inp
    })?
    .rho;
    Ok((
        collapsed == 1.0 && smoothed < 1.0,
        format!("rho {collapsed} at sigma <= alpha/beta, {smoothed} beyond"),
    ))
}

pub const CHECKS: [(&str, CheckFn); 7] = [
    ("gamma_schedule_endpoints", check_gamma),
    ("lpf_measure_closed_form", check_lpf_closed_form),
    ("lpf_sgd_reduces_to_msgd", check_lpf_reduction),
    ("balance_preserves_function", check_balance),
    ("kendall_matches_pair_count", check_kendall),
    ("lanczos_top_eigenvalue", check_lanczos),
    ("ge_ratio_collapse", check_ge_ratio),
];

fn check(seed: u64, out: &mut OutputDir) -> Result<()> {
    let mut t = Table::new("check,passed,detail");
    let mut failed = vec![];
    for (name, f) in CHECKS {
        let (ok, detail) = f(seed).unwrap_or_else(|e| (false, e.to_string()));
        eprintln!("{} {name}: {detail}", if ok { "ok  " } else { "FAIL" });
        if !ok {
            failed.push(name);
        }
        t.push(vec![
            name.to_string(),
            ok.to_string(),
            detail.replace(',', ";"),
        ]);
    }
    out.table("check", "self_test", &t)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(
            flatmin_core::Error::Numeric(format!("self-tests failed: {}", failed.join(", ")))
                .into(),
        )
    }
}
