//! Benchmark grid over (problem, mode, run): one seeded solve per cell,
//! CSV output (per-run rows plus per-mode average rows), and an aligned
//! summary table with the relative change in QP iterations versus exact
//! subproblem solves.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::Parser;
use gradsamp::driver::minimize;
use gradsamp::problems::{generate_random, NamedProblem, RandomMaxQuad};
use gradsamp::{HessianStorage, Mode, ObjectiveOracle, SolverConfig};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

const CSV_HEADER: &str =
    "problem,n,m,m_active,mode,run,seed,iters,qp_iters,funcs,grads,final_f,time_sec,termination_reason";

#[derive(Parser, Debug)]
#[command(
    name = "gs-bench",
    version,
    about = "Seeded benchmark runs of the gradient-sampling solver across subproblem modes"
)]
struct Args {
    /// "random" for the seeded max-of-quadratics generator, or a named
    /// problem (MaxQ, MxHilb, ChainedLQ, ChainedCB3_1, ChainedCB3_2,
    /// ActiveFaces, BrownFunction2, ChainedMifflin2, ChainedCrescent1,
    /// ChainedCrescent2).
    #[arg(long)]
    problem: String,

    /// Problem dimension.
    #[arg(long, default_value_t = 50)]
    n: usize,

    /// Number of affine pieces (random problem only).
    #[arg(long)]
    m: Option<usize>,

    /// Pieces active at the minimizer (random problem only).
    #[arg(long)]
    m_active: Option<usize>,

    /// Comma-separated subset of exact, inexact, inexact-agg.
    #[arg(long, value_delimiter = ',', default_value = "exact,inexact,inexact-agg")]
    modes: Vec<Mode>,

    /// Solves per (problem, mode) cell; run r uses seed `--seed` + r.
    #[arg(long, default_value_t = 10)]
    runs: u64,

    /// Base seed for sampling and, for the random problem, instance and
    /// start-point generation.
    #[arg(long, default_value_t = 1)]
    seed: u64,

    /// Stop a run once f(x) < f-tol.
    #[arg(long)]
    f_tol: Option<f64>,

    /// Per-run wall-clock limit in seconds.
    #[arg(long)]
    time_limit: Option<f64>,

    /// Write the CSV to this path instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,

    /// `key = value` file overriding solver parameter defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Suppress the summary table.
    #[arg(long)]
    quiet: bool,
}

enum Problem {
    Random { oracle: RandomMaxQuad, m: usize, m_active: usize },
    Named { oracle: Box<dyn ObjectiveOracle>, kind: NamedProblem },
}

impl Problem {
    fn label(&self) -> String {
        match self {
            Problem::Random { .. } => "random".into(),
            Problem::Named { kind, .. } => kind.name().into(),
        }
    }

    fn oracle(&self) -> &dyn ObjectiveOracle {
        match self {
            Problem::Random { oracle, .. } => oracle,
            Problem::Named { oracle, .. } => oracle.as_ref(),
        }
    }

    fn m_columns(&self) -> (String, String) {
        match self {
            Problem::Random { m, m_active, .. } => (m.to_string(), m_active.to_string()),
            Problem::Named { .. } => (String::new(), String::new()),
        }
    }
}

struct RunRow {
    mode: Mode,
    run: u64,
    seed: u64,
    iters: u64,
    qp_iters: u64,
    funcs: u64,
    grads: u64,
    final_f: f64,
    time_sec: f64,
    reason: String,
}

struct ModeSummary {
    mode: Mode,
    iters: f64,
    qp_iters: f64,
    funcs: f64,
    grads: f64,
    final_f: f64,
    time_sec: f64,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(args: Args) -> Result<()> {
    if args.runs == 0 {
        bail!("--runs must be at least 1");
    }
    if args.modes.is_empty() {
        bail!("--modes must name at least one mode");
    }

    let mut config = match &args.config {
        Some(path) => load_config(path)?,
        None => SolverConfig::default(),
    };
    if let Some(f_tol) = args.f_tol {
        config.f_tol = Some(f_tol);
    }
    if let Some(limit) = args.time_limit {
        config.time_limit = Some(limit);
    }
    config.validate()?;

    let problem = build_problem(&args)?;
    let x0 = start_point(&problem, &args);

    let jobs: Vec<(Mode, u64)> = args
        .modes
        .iter()
        .flat_map(|&mode| (0..args.runs).map(move |run| (mode, run)))
        .collect();
    let rows: Vec<RunRow> = jobs
        .par_iter()
        .map(|&(mode, run)| solve_cell(&problem, &config, &x0, mode, run, args.seed + run))
        .collect();

    let summaries: Vec<ModeSummary> = args
        .modes
        .iter()
        .map(|&mode| summarize(mode, rows.iter().filter(|r| r.mode == mode)))
        .collect();

    let csv = render_csv(&problem, args.n, &rows, &summaries);
    match &args.out {
        Some(path) => {
            fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?
        }
        None => print!("{csv}"),
    }

    if !args.quiet {
        let table = render_table(&problem, &args, &summaries);
        // Keep stdout machine-readable when it carries the CSV.
        if args.out.is_some() {
            print!("{table}");
        } else {
            eprint!("{table}");
        }
    }
    Ok(())
}

fn build_problem(args: &Args) -> Result<Problem> {
    if args.problem.eq_ignore_ascii_case("random") {
        let m = args.m.ok_or_else(|| anyhow!("the random problem needs --m"))?;
        let m_active = args
            .m_active
            .ok_or_else(|| anyhow!("the random problem needs --m-active"))?;
        if m_active < 1 || m_active > m {
            bail!("--m-active must lie in 1..={m}");
        }
        let oracle = generate_random(args.n, m, m_active, args.seed);
        return Ok(Problem::Random { oracle, m, m_active });
    }
    if args.m.is_some() || args.m_active.is_some() {
        bail!("--m and --m-active apply only to the random problem");
    }
    match NamedProblem::parse(&args.problem) {
        Some(kind) => Ok(Problem::Named { oracle: Box::new(kind.instance(args.n)), kind }),
        None => {
            let names: Vec<&str> = NamedProblem::ALL.iter().map(|p| p.name()).collect();
            bail!(
                "unknown problem '{}': expected random or one of {}",
                args.problem,
                names.join(", ")
            )
        }
    }
}

/// Random instances start from a standard-normal point shared by every mode
/// and run (drawn on a separate stream of the base-seeded generator, so it is
/// independent of the instance's own draws); named problems use their
/// conventional starts.
fn start_point(problem: &Problem, args: &Args) -> DVector<f64> {
    match problem {
        Problem::Random { .. } => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            rng.set_stream(1);
            DVector::from_fn(args.n, |_, _| StandardNormal.sample(&mut rng))
        }
        Problem::Named { kind, .. } => kind.standard_start(args.n),
    }
}

fn solve_cell(
    problem: &Problem,
    base: &SolverConfig,
    x0: &DVector<f64>,
    mode: Mode,
    run: u64,
    seed: u64,
) -> RunRow {
    let config = SolverConfig { mode, seed, ..base.clone() };
    let started = Instant::now();
    match minimize(problem.oracle(), &config, x0) {
        Ok(report) => RunRow {
            mode,
            run,
            seed,
            iters: report.iterations,
            qp_iters: report.counters.qp_iters,
            funcs: report.counters.funcs,
            grads: report.counters.grads,
            final_f: report.final_f,
            time_sec: report.wall_time.as_secs_f64(),
            reason: report.termination.to_string(),
        },
        Err(e) => RunRow {
            mode,
            run,
            seed,
            iters: 0,
            qp_iters: 0,
            funcs: 0,
            grads: 0,
            final_f: f64::NAN,
            time_sec: started.elapsed().as_secs_f64(),
            reason: format!("error: {e}").replace(',', ";"),
        },
    }
}

/// Averages over the mode's completed runs; failed runs carry no meaningful
/// counters and are left out (all-failed cells average to NaN).
fn summarize<'a>(mode: Mode, rows: impl Iterator<Item = &'a RunRow>) -> ModeSummary {
    let rows: Vec<&RunRow> = rows.filter(|r| !r.reason.starts_with("error:")).collect();
    let count = rows.len() as f64;
    let mean = |f: &dyn Fn(&RunRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / count;
    ModeSummary {
        mode,
        iters: mean(&|r| r.iters as f64),
        qp_iters: mean(&|r| r.qp_iters as f64),
        funcs: mean(&|r| r.funcs as f64),
        grads: mean(&|r| r.grads as f64),
        final_f: mean(&|r| r.final_f),
        time_sec: mean(&|r| r.time_sec),
    }
}

fn render_csv(problem: &Problem, n: usize, rows: &[RunRow], summaries: &[ModeSummary]) -> String {
    let label = problem.label();
    let (m, m_active) = problem.m_columns();
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for summary in summaries {
        for r in rows.iter().filter(|r| r.mode == summary.mode) {
            writeln!(
                out,
                "{label},{n},{m},{m_active},{},{},{},{},{},{},{},{:.12e},{:.3},{}",
                r.mode,
                r.run,
                r.seed,
                r.iters,
                r.qp_iters,
                r.funcs,
                r.grads,
                r.final_f,
                r.time_sec,
                r.reason
            )
            .unwrap();
        }
        writeln!(
            out,
            "{label},{n},{m},{m_active},{},avg,,{},{},{},{},{:.6e},{:.3},",
            summary.mode,
            summary.iters.round() as u64,
            summary.qp_iters.round() as u64,
            summary.funcs.round() as u64,
            summary.grads.round() as u64,
            summary.final_f,
            summary.time_sec
        )
        .unwrap();
    }
    out
}

fn render_table(problem: &Problem, args: &Args, summaries: &[ModeSummary]) -> String {
    let mut out = String::new();
    match problem {
        Problem::Random { m, m_active, .. } => writeln!(
            out,
            "problem: random (n = {}, m = {m}, m_active = {m_active}, seed = {}, runs = {})",
            args.n, args.seed, args.runs
        )
        .unwrap(),
        Problem::Named { kind, .. } => writeln!(
            out,
            "problem: {} (n = {}, seed = {}, runs = {})",
            kind.name(),
            args.n,
            args.seed,
            args.runs
        )
        .unwrap(),
    }
    let qp_exact = summaries
        .iter()
        .find(|s| s.mode == Mode::Exact)
        .map(|s| s.qp_iters);
    writeln!(
        out,
        "{:<12} {:>10} {:>12} {:>12} {:>12} {:>14} {:>9} {:>13}",
        "mode", "iters", "qp-iters", "funcs", "grads", "final-f", "time-s", "qp vs exact"
    )
    .unwrap();
    for s in summaries {
        let change = match qp_exact {
            Some(exact) if s.mode != Mode::Exact && exact > 0.0 => {
                format!("{:+.1}%", 100.0 * (s.qp_iters - exact) / exact)
            }
            _ => "-".into(),
        };
        writeln!(
            out,
            "{:<12} {:>10.1} {:>12.1} {:>12.1} {:>12.1} {:>14.6e} {:>9.3} {:>13}",
            s.mode.to_string(),
            s.iters,
            s.qp_iters,
            s.funcs,
            s.grads,
            s.final_f,
            s.time_sec,
            change
        )
        .unwrap();
    }
    out
}

const CONFIG_KEYS: [&str; 26] = [
    "nu",
    "alpha_lo",
    "alpha_hi",
    "alpha_init",
    "rho",
    "kappa",
    "psi",
    "iota",
    "eta_lo",
    "eta_hi",
    "sample_cap",
    "sigma_reset",
    "gamma",
    "phi_lo",
    "phi_hi",
    "xi",
    "chi",
    "sample_add",
    "eps0",
    "stat_tol",
    "f_tol",
    "time_limit",
    "max_iters",
    "exact_kkt_tol",
    "perturb_patience",
    "hessian",
];

/// Reads `key = value` lines (with `#` comments) over the solver defaults.
fn load_config(path: &Path) -> Result<SolverConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut config = SolverConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected `key = value`", path.display(), idx + 1))?;
        set_config_key(&mut config, key.trim(), value.trim())
            .map_err(|e| anyhow!("{}:{}: {e}", path.display(), idx + 1))?;
    }
    config.validate()?;
    Ok(config)
}

fn set_config_key(config: &mut SolverConfig, key: &str, value: &str) -> Result<()> {
    fn float(value: &str) -> Result<f64> {
        value.parse().map_err(|_| anyhow!("`{value}` is not a number"))
    }
    fn integer(value: &str) -> Result<u64> {
        value.parse().map_err(|_| anyhow!("`{value}` is not an integer"))
    }
    match key {
        "nu" => config.nu = float(value)?,
        "alpha_lo" => config.alpha_lo = float(value)?,
        "alpha_hi" => config.alpha_hi = float(value)?,
        "alpha_init" => config.alpha_init = float(value)?,
        "rho" => config.rho = float(value)?,
        "kappa" => config.kappa = float(value)?,
        "psi" => config.psi = float(value)?,
        "iota" => config.iota = float(value)?,
        "eta_lo" => config.eta_lo = float(value)?,
        "eta_hi" => config.eta_hi = float(value)?,
        "sample_cap" => config.sample_cap = Some(integer(value)? as usize),
        "sigma_reset" => config.sigma_reset = float(value)?,
        "gamma" => config.gamma = float(value)?,
        "phi_lo" => config.phi_lo = float(value)?,
        "phi_hi" => config.phi_hi = float(value)?,
        "xi" => config.xi = float(value)?,
        "chi" => config.chi = float(value)?,
        "sample_add" => config.sample_add = integer(value)? as usize,
        "eps0" => config.eps0 = Some(float(value)?),
        "stat_tol" => config.stat_tol = float(value)?,
        "f_tol" => config.f_tol = Some(float(value)?),
        "time_limit" => config.time_limit = Some(float(value)?),
        "max_iters" => config.max_iters = Some(integer(value)?),
        "exact_kkt_tol" => config.exact_kkt_tol = float(value)?,
        "perturb_patience" => config.perturb_patience = integer(value)?,
        "hessian" => {
            config.hessian = if value.eq_ignore_ascii_case("full") {
                HessianStorage::Full
            } else {
                HessianStorage::Limited(integer(value)? as usize)
            }
        }
        other => bail!("unknown key `{other}`; valid keys: {}", CONFIG_KEYS.join(", ")),
    }
    Ok(())
}
