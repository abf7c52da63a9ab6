use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ensemble_fem::ensemble::Scheme;
use ensemble_fem::harness::{run_compare, run_convergence, write_atomic, ConvergenceConfig, Defaults};
use ensemble_fem::stability::StabilityPolicy;
use ensemble_fem::stochastic::{mc_rate_study, run_emc, EmcConfig};
use ensemble_fem::Error;

/// Overrides the worker thread count when set.
const THREADS_ENV: &str = "ENSEMBLE_FEM_THREADS";

#[derive(Parser)]
#[command(name = "ensemble-fem", version, about = "Ensemble time stepping and ensemble Monte Carlo for 2D parabolic problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Ensemble,
    Independent,
}

impl From<Mode> for Scheme {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Ensemble => Scheme::Ensemble,
            Mode::Independent => Scheme::Independent,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Refinement study on the smooth three-member test problem.
    Converge {
        #[arg(long, value_enum, default_value = "ensemble")]
        mode: Mode,
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long)]
        degree: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One ensemble Monte Carlo run for the random diffusion problem.
    Emc {
        #[arg(long = "j")]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        nx: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Whitespace-separated `x y mean std` rows for plotting.
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Exit with status 2 instead of splitting an unstable ensemble.
        #[arg(long)]
        refuse_unstable: bool,
    },
    /// Sample-count convergence of the Monte Carlo mean.
    Rate {
        #[arg(long, value_delimiter = ',')]
        j_list: Option<Vec<usize>>,
        #[arg(long)]
        j0: Option<usize>,
        #[arg(long)]
        replicas: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        nx: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        refuse_unstable: bool,
    },
    /// Ensemble Monte Carlo against per-sample backward Euler on identical draws.
    Compare {
        #[arg(long = "j")]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        nx: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        refuse_unstable: bool,
    },
}

fn policy(refuse: bool) -> StabilityPolicy {
    if refuse {
        StabilityPolicy::Refuse
    } else {
        StabilityPolicy::Partition
    }
}

fn emit(out: Option<&PathBuf>, contents: &str) -> ensemble_fem::Result<()> {
    match out {
        Some(path) => write_atomic(path, contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

/// Stats go to stdout when the main output went to a file, else to stderr.
fn stats_line<S: serde::Serialize>(out: Option<&PathBuf>, stats: &S) {
    let line = serde_json::to_string(stats).expect("stats serialize");
    if out.is_some() {
        println!("{line}");
    } else {
        eprintln!("{line}");
    }
}

fn emc_config(samples: Option<usize>, seed: u64, nx: Option<usize>, dt: Option<f64>, refuse: bool) -> EmcConfig {
    let d = Defaults::get();
    let mut cfg = d.emc_config(seed);
    cfg.samples = samples.unwrap_or(cfg.samples);
    cfg.nx = nx.unwrap_or(cfg.nx);
    cfg.dt = dt.unwrap_or(cfg.dt);
    cfg.policy = policy(refuse);
    cfg
}

fn execute(command: Command) -> ensemble_fem::Result<()> {
    match command {
        Command::Converge { mode, levels, degree, out } => {
            let mut cfg = ConvergenceConfig::from_defaults(mode.into());
            cfg.levels = levels.unwrap_or(cfg.levels);
            cfg.degree = degree.unwrap_or(cfg.degree);
            let study = run_convergence::<f64>(&cfg)?;
            if cfg.scheme == Scheme::Ensemble {
                if let Some(r) = study.stability.iter().find(|r| !r.satisfied) {
                    return Err(Error::StabilityViolation {
                        theta: r.theta,
                        theta_plus: r.theta_plus,
                        report: r.to_json(),
                    });
                }
            }
            emit(out.as_ref(), &study.to_csv())?;
            for s in &study.stats {
                stats_line(out.as_ref(), s);
            }
        }
        Command::Emc { samples, seed, nx, dt, out, plot, refuse_unstable } => {
            let cfg = emc_config(samples, seed, nx, dt, refuse_unstable);
            let result = run_emc::<f64>(&cfg)?;
            let mut json = result.to_json();
            json.push('\n');
            emit(out.as_ref(), &json)?;
            if let Some(path) = plot {
                let space = cfg.build_space::<f64>()?;
                let mut data = String::from("# x y mean std\n");
                for ((p, m), s) in space.dof_coords().iter().zip(&result.mean_field).zip(&result.std_field) {
                    let _ = writeln!(data, "{} {} {:.12e} {:.12e}", p.x, p.y, m, s);
                }
                write_atomic(&path, &data)?;
            }
            stats_line(out.as_ref(), &result.stats);
        }
        Command::Rate { j_list, j0, replicas, seed, nx, dt, out, refuse_unstable } => {
            let d = Defaults::get();
            let mut cfg = d.rate_config(seed);
            cfg.nx = nx.unwrap_or(cfg.nx);
            cfg.dt = dt.unwrap_or(cfg.dt);
            cfg.policy = policy(refuse_unstable);
            let j_list = j_list.unwrap_or_else(|| d.rate.sample_counts.clone());
            let j0 = j0.unwrap_or(d.rate.benchmark);
            if let Some(&j) = j_list.iter().find(|&&j| j >= j0) {
                return Err(Error::Config(format!("every J must be smaller than J0 (J = {j}, J0 = {j0})")));
            }
            let study = mc_rate_study::<f64>(&cfg, &j_list, j0, replicas.unwrap_or(d.rate.replicas))?;
            emit(out.as_ref(), &study.to_csv())?;
            stats_line(out.as_ref(), &study.stats);
        }
        Command::Compare { samples, seed, nx, dt, out, refuse_unstable } => {
            let cfg = emc_config(samples, seed, nx, dt, refuse_unstable);
            let record = run_compare::<f64>(&cfg)?;
            let mut json = serde_json::to_string_pretty(&record).expect("record serializes");
            json.push('\n');
            emit(out.as_ref(), &json)?;
            stats_line(out.as_ref(), &record.stats);
        }
    }
    Ok(())
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| format!("{THREADS_ENV} must be a positive integer (got {value:?})"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::StabilityViolation { report, .. }) => {
            eprintln!("error: stability condition violated; rerun without --refuse-unstable to split the ensemble");
            eprintln!("{report}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
