//! The `oufield` command-line driver.
//!
//! Exit codes: 0 success, 1 usage, 2 data or configuration error,
//! 3 numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Serialize;

use oufield_core::fixture::{generate, quick_mcmc, FixtureSpec};
use oufield_core::forecast::{ForecastExport, Forecaster, RankedFacility, Scenario};
use oufield_core::inference::{diagnostics, dic, pooled, run_chains, substream, summarize, Dic, ParamSummary, Trace};
use oufield_core::io::{
    load_dataset, load_run_config, read_traces, to_json_pretty, write_summary_table, write_traces, AsciiRaster,
    Dataset, ModelBundle, RunConfig, RunStamp,
};
use oufield_core::ou_dist::{phi_error_bound, solve_lyapunov, time_avg_exact, time_avg_sar, OuSystem};
use oufield_core::sde::{empirical_moments, ensemble_averages, simulate_coupled, InitialCondition, SimConfig, So2Init};
use oufield_core::sulfate::Theta;
use oufield_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "oufield", version, about = "Mechanistic OU spatial model for SO2 to SO4 transport")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Random seed; overrides the configured MCMC seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads (falls back to OUFIELD_THREADS, then all cores).
    #[arg(long, global = true, value_name = "N", env = "OUFIELD_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Assemble operators and print structural diagnostics.
    Check,
    /// Run MCMC; write traces, a parameter summary and a model bundle.
    Fit,
    /// Forecast an emission-reduction scenario from fitted traces.
    Forecast(ForecastArgs),
    /// Posterior-predictive fields and a coupled SO2/SO4 path.
    Simulate(SimulateArgs),
    /// Run the closed-form and Monte Carlo checks on the bundled 4x4 fixture.
    Validate(ValidateArgs),
    /// Serve the HTTP API for a model bundle.
    Serve(ServeArgs),
    /// Write a synthetic run directory (data drawn from the model).
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    /// Directory holding chain_*.csv traces [default: OUT/traces].
    #[arg(long, value_name = "DIR")]
    pub traces: Option<PathBuf>,
    /// Facility reduction as ID=FRACTION; repeatable. Default: every candidate at the configured fraction.
    #[arg(long = "reduce", value_name = "ID=FRACTION")]
    pub reduce: Vec<String>,
    /// Posterior-predictive draws [default: forecast.n_draws].
    #[arg(long)]
    pub n_draws: Option<usize>,
    /// Leave out the field noise term (posterior of the mean only).
    #[arg(long)]
    pub no_noise: bool,
    /// Skip the per-facility ranking.
    #[arg(long)]
    pub no_rank: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Directory holding chain_*.csv traces [default: OUT/traces if present].
    #[arg(long, value_name = "DIR")]
    pub traces: Option<PathBuf>,
    /// Posterior-predictive field draws.
    #[arg(long, default_value_t = 100)]
    pub draws: usize,
    /// Euler-Maruyama step for the coupled path.
    #[arg(long, default_value_t = 1e-3)]
    pub dt: f64,
    /// Keep every k-th state of the path.
    #[arg(long, default_value_t = 10)]
    pub thin: usize,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Monte Carlo paths for the time-average check.
    #[arg(long, default_value_t = 20_000)]
    pub paths: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Model bundle [default: OUT/bundle.json]; without one every endpoint answers 409.
    #[arg(long, value_name = "PATH")]
    pub bundle: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 12)]
    pub nx: usize,
    #[arg(long, default_value_t = 12)]
    pub ny: usize,
    /// MCMC iterations written into the generated run.json.
    #[arg(long, default_value_t = 2000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 500)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 2)]
    pub chains: usize,
}

/// An error with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            code: if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_DATA },
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.global.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return EXIT_USAGE;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::debug!("thread pool already configured: {e}");
        }
    }
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Check => cmd_check(g),
        Command::Fit => cmd_fit(g),
        Command::Forecast(a) => cmd_forecast(g, a),
        Command::Simulate(a) => cmd_simulate(g, a),
        Command::Validate(a) => cmd_validate(g, a),
        Command::Serve(a) => cmd_serve(g, a),
        Command::Synth(a) => cmd_synth(g, a),
    }
}

// ---------------------------------------------------------------- helpers

fn require_config(g: &GlobalArgs) -> CliResult<RunConfig> {
    let path = g.config.as_ref().ok_or_else(|| usage("this command needs --config PATH"))?;
    Ok(load_run_config(path)?)
}

fn out_dir(g: &GlobalArgs) -> CliResult<PathBuf> {
    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn stamp(cfg: &RunConfig, seed: u64) -> RunStamp {
    RunStamp {
        config_hash: cfg.hash.clone(),
        seed,
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    write_text(path, &(to_json_pretty(v)? + "\n"))
}

/// Parameters used for diagnostics when no fit is available.
fn working_theta(cfg: &RunConfig) -> Theta {
    let base = cfg.mcmc.init.unwrap_or_else(Theta::reference);
    Theta {
        delta: cfg.delta,
        t: cfg.t,
        ..base
    }
}

// ---------------------------------------------------------------- check

#[derive(Serialize)]
struct CheckReport {
    config_hash: String,
    grid: oufield_core::io::GridSpec,
    facilities_in_domain: usize,
    facilities_out_of_domain: Vec<String>,
    observed_cells: usize,
    theta: Theta,
    flux_norm_inf: f64,
    column_sum_defect: f64,
    column_sum_tolerance: f64,
    diffusion_row_defect: f64,
    m_matrix_sign_pattern: bool,
    gershgorin_lower_bound: f64,
    min_eigenvalue: Option<f64>,
    pass: bool,
}

fn cmd_check(g: &GlobalArgs) -> CliResult<()> {
    let cfg = require_config(g)?;
    let ds = load_dataset(&cfg)?;
    let th = working_theta(&cfg);
    let rep = ds.operator.report(th.gamma, th.alpha, th.delta)?;
    let tol = 1e-10 * rep.flux_norm_inf;
    let eig_ok = rep.min_eigenvalue.is_none_or(|e| e >= th.delta - 1e-8 * th.delta.max(1.0));
    let pass = rep.conserves_mass() && rep.m_matrix_sign_pattern && eig_ok;
    let report = CheckReport {
        config_hash: cfg.hash.clone(),
        grid: oufield_core::io::GridSpec::of(&ds.grid),
        facilities_in_domain: ds.inventory.cells.iter().filter(|c| c.is_some()).count(),
        facilities_out_of_domain: ds
            .inventory
            .out_of_domain
            .iter()
            .cloned()
            .collect(),
        observed_cells: ds.obs.n_valid(),
        theta: th,
        flux_norm_inf: rep.flux_norm_inf,
        column_sum_defect: rep.column_sum_defect,
        column_sum_tolerance: tol,
        diffusion_row_defect: rep.diffusion_row_defect,
        m_matrix_sign_pattern: rep.m_matrix_sign_pattern,
        gershgorin_lower_bound: rep.gershgorin_lower_bound,
        min_eigenvalue: rep.min_eigenvalue,
        pass,
    };
    println!("config hash        {}", report.config_hash);
    println!("grid               {} x {} cells, {:.3} x {:.3} km", ds.grid.nx, ds.grid.ny, ds.grid.dx, ds.grid.dy);
    println!(
        "facilities         {} in domain, {} outside",
        report.facilities_in_domain,
        report.facilities_out_of_domain.len()
    );
    println!("observed cells     {} of {}", report.observed_cells, ds.grid.n_cells());
    println!("operator at        gamma={} alpha={} delta={}", th.gamma, th.alpha, th.delta);
    println!(
        "column-sum defect  {:.3e} (limit {:.3e}) {}",
        rep.column_sum_defect,
        tol,
        if rep.conserves_mass() { "ok" } else { "FAIL" }
    );
    println!("D row-sum defect   {:.3e}", rep.diffusion_row_defect);
    println!("M-matrix pattern   {}", if rep.m_matrix_sign_pattern { "ok" } else { "FAIL" });
    println!("Gershgorin bound   {:.6}", rep.gershgorin_lower_bound);
    match rep.min_eigenvalue {
        Some(e) => println!("min Re(eigenvalue) {e:.6} {}", if eig_ok { "ok" } else { "FAIL" }),
        None => println!("min Re(eigenvalue) skipped (grid above the dense limit)"),
    }
    if let Some(dir) = &g.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("check.json"), &report)?;
    }
    if !rep.conserves_mass() {
        return Err(CliError {
            code: EXIT_NUMERICAL,
            message: format!(
                "operator column-sum defect {:.3e} exceeds {:.3e}",
                rep.column_sum_defect, tol
            ),
        });
    }
    if !pass {
        return Err(CliError {
            code: EXIT_NUMERICAL,
            message: "operator diagnostics failed".into(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------- fit

#[derive(Serialize)]
struct FitReport<'a> {
    config_hash: &'a str,
    seed: u64,
    chains: usize,
    iterations: usize,
    burn_in: usize,
    summary: &'a [ParamSummary],
    dic: Option<Dic>,
    acceptance: Vec<BTreeMap<String, f64>>,
    failed_proposals: Vec<u64>,
}

fn cmd_fit(g: &GlobalArgs) -> CliResult<()> {
    let mut cfg = require_config(g)?;
    if let Some(s) = g.seed {
        cfg.mcmc.seed = s;
    }
    let ds = load_dataset(&cfg)?;
    let out = out_dir(g)?;
    let st = stamp(&cfg, cfg.mcmc.seed);
    let mut post = ds.posterior(&cfg)?;
    log::info!(
        "fitting {} chains x {} iterations on {} observed cells",
        cfg.mcmc.chains,
        cfg.mcmc.iterations,
        ds.obs.n_valid()
    );
    let traces = match run_chains(&cfg.mcmc, &post) {
        Ok(t) => t,
        Err(e) => {
            write_traces(&out.join("traces"), &e.partial, &st)?;
            return Err(CliError {
                code: if e.error.is_numerical() { EXIT_NUMERICAL } else { EXIT_DATA },
                message: format!("{e}; partial traces written to {}", out.join("traces").display()),
            });
        }
    };
    write_traces(&out.join("traces"), &traces, &st)?;
    let summary = summarize(&traces)?;
    let d = match dic(&traces, &mut post) {
        Ok(d) => Some(d),
        Err(e) => {
            log::warn!("DIC unavailable: {e}");
            None
        }
    };
    let mut table = write_summary_table(&traces, Some(&st))?;
    if let Some(d) = &d {
        let _ = writeln!(table, "\nDIC {:.2} (mean deviance {:.2}, p_D {:.2})", d.dic, d.mean_deviance, d.p_d);
    }
    print!("{table}");
    write_text(&out.join("summary.txt"), &table)?;
    if diagnostics(&traces).is_err() {
        log::warn!("convergence diagnostics need at least 2 chains and 100 kept samples");
    }
    write_json(
        &out.join("fit.json"),
        &FitReport {
            config_hash: &st.config_hash,
            seed: st.seed,
            chains: cfg.mcmc.chains,
            iterations: cfg.mcmc.iterations,
            burn_in: cfg.mcmc.burn_in,
            summary: &summary,
            dic: d,
            acceptance: traces.iter().map(|t| t.acceptance.clone()).collect(),
            failed_proposals: traces.iter().map(|t| t.failed_proposals).collect(),
        },
    )?;
    let bundle = ModelBundle::build(&ds, &traces, &st)?;
    bundle.save(&out.join("bundle.json"))?;
    Ok(())
}

// ---------------------------------------------------------------- forecast

#[derive(Serialize)]
struct RankingExport<'a> {
    config_hash: &'a str,
    seed: u64,
    fraction: f64,
    n_draws: usize,
    include_noise: bool,
    ranking: Vec<RankRow>,
}

#[derive(Serialize)]
struct RankRow {
    id: String,
    mean: f64,
    lo: f64,
    hi: f64,
    se: f64,
}

impl From<RankedFacility> for RankRow {
    fn from(r: RankedFacility) -> Self {
        RankRow {
            id: r.id,
            mean: r.summary.mean,
            lo: r.summary.lo,
            hi: r.summary.hi,
            se: r.summary.se,
        }
    }
}

fn parse_reductions(items: &[String]) -> CliResult<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for it in items {
        let (id, frac) = it
            .split_once('=')
            .ok_or_else(|| usage(format!("--reduce expects ID=FRACTION, got `{it}`")))?;
        let f: f64 = frac
            .parse()
            .map_err(|_| usage(format!("--reduce fraction `{frac}` is not a number")))?;
        out.insert(id.to_string(), f);
    }
    Ok(out)
}

fn traces_dir(arg: &Option<PathBuf>, g: &GlobalArgs) -> PathBuf {
    arg.clone()
        .unwrap_or_else(|| g.out.clone().unwrap_or_else(|| PathBuf::from("out")).join("traces"))
}

fn candidates(cfg: &RunConfig, ds: &Dataset) -> Vec<String> {
    cfg.forecast.candidates.clone().unwrap_or_else(|| {
        ds.inventory
            .facilities
            .iter()
            .zip(&ds.inventory.cells)
            .filter(|(f, c)| c.is_some() && f.so2_tons > 0.0)
            .map(|(f, _)| f.facility_id.clone())
            .collect()
    })
}

fn cmd_forecast(g: &GlobalArgs, a: &ForecastArgs) -> CliResult<()> {
    let cfg = require_config(g)?;
    let seed = g.seed.unwrap_or(cfg.mcmc.seed);
    let ds = load_dataset(&cfg)?;
    let traces = read_traces(&traces_dir(&a.traces, g))?;
    let out = out_dir(g)?;
    let n_draws = a.n_draws.unwrap_or(cfg.forecast.n_draws);
    let include_noise = cfg.forecast.include_noise && !a.no_noise;
    let fc = Forecaster::new(ds.model(traces[0].theta(&traces[0].samples[0]))?, ds.inventory.clone(), &traces)?
        .with_noise(include_noise);
    let cands = candidates(&cfg, &ds);
    let reductions = if a.reduce.is_empty() {
        cands.iter().map(|id| (id.clone(), cfg.forecast.fraction)).collect()
    } else {
        parse_reductions(&a.reduce)?
    };
    let label = if a.reduce.is_empty() { "all-candidates" } else { "custom" };
    let sc = Scenario::new(label, reductions, &ds.inventory)?;
    let f = fc.forecast(&sc, n_draws, seed, &ds.population)?;
    let export = ForecastExport::new(&f, include_noise, seed, Some(cfg.hash.clone()));
    write_json(&out.join("forecast.json"), &export)?;
    println!(
        "scenario {}: mean exposure reduction {:.4} (95% interval {:.4} to {:.4}) over {} draws",
        sc.label, f.exposure.mean, f.exposure.lo, f.exposure.hi, n_draws
    );
    if !a.no_rank && !cands.is_empty() {
        let ranked = fc.rank_facilities(&cands, cfg.forecast.fraction, n_draws, &ds.population, seed)?;
        for (k, r) in ranked.iter().enumerate() {
            println!(
                "{:>3}. {:<12} {:.4} ({:.4}, {:.4})",
                k + 1,
                r.id,
                r.summary.mean,
                r.summary.lo,
                r.summary.hi
            );
        }
        write_json(
            &out.join("ranking.json"),
            &RankingExport {
                config_hash: &cfg.hash,
                seed,
                fraction: cfg.forecast.fraction,
                n_draws,
                include_noise,
                ranking: ranked.into_iter().map(RankRow::from).collect(),
            },
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------- simulate

#[derive(Serialize)]
struct SimulateReport {
    config_hash: String,
    seed: u64,
    theta_source: String,
    theta: Theta,
    draws: usize,
    predictive_mean: Vec<f64>,
    path_dt: f64,
    path_time_average: Vec<f64>,
}

fn cmd_simulate(g: &GlobalArgs, a: &SimulateArgs) -> CliResult<()> {
    let cfg = require_config(g)?;
    let seed = g.seed.unwrap_or(cfg.mcmc.seed);
    let ds = load_dataset(&cfg)?;
    let out = out_dir(g)?;
    let dir = traces_dir(&a.traces, g);
    let (thetas, source) = if dir.is_dir() {
        let tr: Vec<Trace> = read_traces(&dir)?;
        (pooled(&tr), format!("posterior ({})", dir.display()))
    } else if a.traces.is_some() {
        return Err(Error::Data(format!("trace directory {} does not exist", dir.display())).into());
    } else {
        (vec![working_theta(&cfg)], "configured initial values".to_string())
    };
    if thetas.is_empty() {
        return Err(Error::Data("no post-burn-in samples to simulate from".into()).into());
    }
    let fc = Forecaster::from_thetas(ds.model(thetas[0])?, ds.inventory.clone(), thetas.clone())?;
    let everything = Scenario::new(
        "baseline",
        ds.inventory.facilities.iter().map(|f| (f.facility_id.clone(), 1.0)).collect(),
        &ds.inventory,
    )?;
    let n = ds.grid.n_cells();
    let mut predictive_mean = vec![0.0; n];
    let mut csv = (0..n).map(|k| format!("c{k}")).collect::<Vec<_>>().join(",");
    csv.push('\n');
    if a.draws > 0 {
        let fields = fc.forecast_reduction(&everything, a.draws, seed)?;
        for f in &fields {
            let row: Vec<String> = f.iter().map(|v| v.to_string()).collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
            for (m, v) in predictive_mean.iter_mut().zip(f) {
                *m += v / a.draws as f64;
            }
        }
        AsciiRaster::from_grid(&ds.grid, predictive_mean.clone())?.write(&out.join("predictive_mean.asc"))?;
    }
    write_text(&out.join("predictive.csv"), &csv)?;

    let theta = summarize_theta(&thetas);
    let mut model = ds.model(theta)?;
    let sim = SimConfig {
        dt: a.dt,
        t: theta.t,
        seed,
        ..SimConfig::default()
    };
    let mut rng = substream(seed, u64::MAX);
    let path = simulate_coupled(&mut model, &theta, So2Init::SteadyState, &sim, &mut rng)?;
    let file = fs::File::create(out.join("path.csv")).map_err(|e| Error::io(out.join("path.csv"), e))?;
    path.so4.write_csv(std::io::BufWriter::new(file), a.thin.max(1))?;
    let report = SimulateReport {
        config_hash: cfg.hash.clone(),
        seed,
        theta_source: source,
        theta,
        draws: a.draws,
        predictive_mean,
        path_dt: a.dt,
        path_time_average: oufield_core::sde::time_average_path(&path.so4),
    };
    write_json(&out.join("simulate.json"), &report)?;
    println!("wrote {} predictive draws and a coupled path to {}", a.draws, out.display());
    Ok(())
}

/// Componentwise mean of a set of thetas.
fn summarize_theta(thetas: &[Theta]) -> Theta {
    let n = thetas.len() as f64;
    let avg = |f: fn(&Theta) -> f64| thetas.iter().map(f).sum::<f64>() / n;
    Theta {
        gamma: avg(|t| t.gamma),
        alpha: avg(|t| t.alpha),
        eta: avg(|t| t.eta),
        beta: avg(|t| t.beta),
        sigma2: avg(|t| t.sigma2),
        ..thetas[0]
    }
}

// ---------------------------------------------------------------- validate

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

fn frob_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// Lyapunov residual, time-averaged covariance against Monte Carlo and the
/// SAR error bound on the 4x4 synthetic fixture.
pub fn validation_checks(paths: usize, seed: u64) -> oufield_core::Result<Vec<Check>> {
    let fx = generate(&FixtureSpec::small())?;
    let model = fx.model()?;
    let op = model.operator().clone();
    let th = fx.spec.theta;
    let mut checks = Vec::new();

    let a_y = op.assemble(th.gamma, th.alpha, th.delta)?;
    let sys = OuSystem::new(a_y.clone(), vec![0.0; a_y.n()], th.sigma2)?;
    let a = a_y.to_dense_checked()?;
    let q = sys.noise_covariance();
    let s = solve_lyapunov(&a, &q)?;
    let resid = (&a * &s + &s * a.transpose() - &q).norm() / q.norm();
    checks.push(Check {
        name: "Lyapunov residual / |Q|_F".into(),
        value: resid,
        limit: 1e-8,
        pass: resid <= 1e-8,
    });

    // Monte Carlo at a moderate deposition rate keeps the Euler bias small.
    let delta_mc = 2.0;
    let a_mc = op.assemble(th.gamma, th.alpha, delta_mc)?;
    let sys_mc = OuSystem::new(a_mc, vec![0.0; a_y.n()], 1.0)?;
    let psi = time_avg_exact(&sys_mc, th.t)?.covariance()?;
    let cfg = SimConfig {
        dt: 1e-3,
        t: th.t,
        n_paths: paths,
        seed,
        init: InitialCondition::Stationary,
        store_every: 1,
    };
    let avgs = ensemble_averages(&sys_mc, &cfg)?;
    let (_, emp) = empirical_moments(&avgs);
    let err = frob_rel(&emp, &psi);
    checks.push(Check {
        name: format!("time-averaged covariance vs {paths} Euler paths (rel. Frobenius)"),
        value: err,
        limit: 0.05,
        pass: err <= 0.05,
    });

    // The bound covers A = gamma D + delta I with unit noise variance.
    let bound = phi_error_bound(th.delta, th.t)?;
    let a_sym = op.assemble(th.gamma, 0.0, th.delta)?;
    let sys_sym = OuSystem::new(a_sym, vec![0.0; a_y.n()], 1.0)?;
    let gap = spectral_norm(
        &(time_avg_exact(&sys_sym, th.t)?.covariance()? - time_avg_sar(&sys_sym, th.t)?.covariance()?),
    );
    checks.push(Check {
        name: "|Psi - Phi|_2 for gamma D + delta I vs closed-form bound".into(),
        value: gap,
        limit: bound,
        pass: gap <= bound * (1.0 + 1e-9),
    });
    Ok(checks)
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().singular_values().max()
}

fn cmd_validate(g: &GlobalArgs, a: &ValidateArgs) -> CliResult<()> {
    let seed = g.seed.unwrap_or(0);
    let checks = validation_checks(a.paths, seed)?;
    let mut all = true;
    for c in &checks {
        println!(
            "{}  {:<70} {:.3e} (limit {:.3e})",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.limit
        );
        all &= c.pass;
    }
    if let Some(dir) = &g.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        #[derive(Serialize)]
        struct Report<'a> {
            seed: u64,
            paths: usize,
            checks: &'a [Check],
            pass: bool,
        }
        write_json(
            &dir.join("validate.json"),
            &Report {
                seed,
                paths: a.paths,
                checks: &checks,
                pass: all,
            },
        )?;
    }
    if all {
        println!("all checks passed");
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_NUMERICAL,
            message: "validation failed".into(),
        })
    }
}

// ---------------------------------------------------------------- serve

fn cmd_serve(g: &GlobalArgs, a: &ServeArgs) -> CliResult<()> {
    let path = a.bundle.clone().or_else(|| g.out.as_ref().map(|d| d.join("bundle.json")));
    let state = match path {
        Some(p) if p.is_file() => oufield_service::AppState::with_bundle(ModelBundle::load(&p)?)?,
        Some(p) if a.bundle.is_some() => {
            return Err(Error::config("--bundle", format!("{} does not exist", p.display())).into())
        }
        _ => {
            log::warn!("no model bundle; every endpoint will answer 409");
            oufield_service::AppState::empty()
        }
    };
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError {
            code: EXIT_DATA,
            message: format!("starting runtime: {e}"),
        })?;
    println!("serving on http://{}", a.addr);
    rt.block_on(oufield_service::serve(state, a.addr)).map_err(|e| CliError {
        code: EXIT_DATA,
        message: format!("server error: {e}"),
    })
}

// ---------------------------------------------------------------- synth

fn cmd_synth(g: &GlobalArgs, a: &SynthArgs) -> CliResult<()> {
    let seed = g.seed.unwrap_or(1);
    let out = g.out.clone().ok_or_else(|| usage("synth needs --out DIR"))?;
    let fx = generate(&FixtureSpec::new(a.nx, a.ny, seed))?;
    let mut mcmc = quick_mcmc(seed);
    mcmc.iterations = a.iterations;
    mcmc.burn_in = a.burn_in;
    mcmc.chains = a.chains;
    mcmc.validate()?;
    let cfg = fx.write_run_dir(&out, &mcmc)?;
    println!("wrote {}", cfg.display());
    Ok(())
}
