use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mfc_cli::config::ProblemConfig;
use mfc_cli::oracle::{meanvar_oracle, systemic_oracle, OracleReport};
use mfc_cli::table::merge_tables;
use mfc_cli::{run_experiment, ExperimentConfig, ExperimentError};
use mfc_core::dynamics::substream;
use mfc_core::measure::{estimate_bin_density, BinGrid};
use mfc_core::problems::{MeanVarParams, MinMaxParams, SystemicParams};

#[derive(Parser)]
#[command(name = "mfc", version, about = "Neural solvers for mean-field control benchmarks")]
struct Cli {
    /// Worker threads for particle-parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate the experiment described by a TOML config.
    Train {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the closed-form solutions against independent oracles.
    OracleCheck {
        #[arg(long, value_enum, default_value_t = OracleProblem::All)]
        problem: OracleProblem,
        /// Horizon; both published horizons of the mean-variance problem when absent.
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge results tables and sort them by (method, K, dt, case).
    Table {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the bin density of a benchmark initial law as CSV.
    DumpDensity {
        #[arg(value_enum)]
        problem: DensityProblem,
        #[arg(long, default_value_t = 1)]
        case: usize,
        #[arg(long, default_value_t = 50)]
        k: usize,
        #[arg(long)]
        horizon: Option<f64>,
        /// Estimate from this many samples instead of binning the exact pdf.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleProblem {
    Systemic,
    MeanVariance,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum DensityProblem {
    Systemic,
    Minmax,
    MeanVariance,
}

fn emit(out: Option<&Path>, file: &str, text: &str) -> Result<(), String> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
            let path = dir.join(file);
            std::fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display()))?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> ExitCode {
    let mut cfg = match ExperimentConfig::load(config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output.dir = o;
    }
    match run_experiment(&cfg) {
        Ok(report) => {
            for r in &report.rows {
                let reference = r.reference.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
                println!("case {}: {:.4} (ref {reference}) {:.0}s", r.case, r.calc, r.wall_secs);
            }
            eprintln!("wrote {}", cfg.output.dir.join(&cfg.output.table).display());
            ExitCode::SUCCESS
        }
        Err(e @ ExperimentError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e @ ExperimentError::Diverged { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn oracle_check(problem: OracleProblem, horizon: Option<f64>, out: Option<PathBuf>) -> Result<bool, String> {
    let mut reports: Vec<OracleReport> = Vec::new();
    if matches!(problem, OracleProblem::Systemic | OracleProblem::All) {
        let p = SystemicParams { horizon: horizon.unwrap_or(0.2), ..Default::default() };
        reports.push(systemic_oracle(&p).map_err(|e| e.to_string())?);
    }
    if matches!(problem, OracleProblem::MeanVariance | OracleProblem::All) {
        let horizons = horizon.map(|t| vec![t]).unwrap_or_else(|| vec![0.2, 0.5]);
        for t in horizons {
            let p = MeanVarParams { horizon: t, ..Default::default() };
            reports.push(meanvar_oracle(&p).map_err(|e| e.to_string())?);
        }
    }
    let text: String = reports.iter().map(|r| r.to_string()).collect::<Vec<_>>().join("\n");
    emit(out.as_deref(), "oracle.txt", &text)?;
    Ok(reports.iter().all(OracleReport::pass))
}

fn dump_density(
    problem: DensityProblem,
    case: usize,
    k: usize,
    horizon: Option<f64>,
    samples: Option<usize>,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<(), String> {
    let mut pc = match problem {
        DensityProblem::Systemic => ProblemConfig::Systemic(SystemicParams::default()),
        DensityProblem::Minmax => ProblemConfig::Minmax(MinMaxParams::default()),
        DensityProblem::MeanVariance => ProblemConfig::MeanVariance(MeanVarParams::default()),
    };
    if let Some(t) = horizon {
        match &mut pc {
            ProblemConfig::Systemic(p) => p.horizon = t,
            ProblemConfig::Minmax(p) => p.horizon = t,
            ProblemConfig::MeanVariance(p) => p.horizon = t,
        }
    }
    let (lo, hi) = pc.default_domain();
    let grid = BinGrid::new(lo, hi, k).map_err(|e| e.to_string())?;
    let law = pc.case(case).map_err(|e| e.to_string())?;
    let density = match samples {
        Some(n) => {
            let xs = law.sample(n, &mut substream(seed, &[case as u64]));
            estimate_bin_density(&xs, &grid)
        }
        None => law.to_bin_density(&grid),
    }
    .map_err(|e| e.to_string())?;
    emit(out.as_deref(), &format!("density_{}_case{case}.csv", pc.id()), &density.to_csv())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let done = |r: Result<(), String>| match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    };
    match cli.command {
        Command::Train { config, seed, out } => train(&config, seed, out),
        Command::OracleCheck { problem, horizon, out } => match oracle_check(problem, horizon, out) {
            Ok(true) => ExitCode::SUCCESS,
            Ok(false) => {
                eprintln!("error: oracle check failed");
                ExitCode::FAILURE
            }
            Err(e) => done(Err(e)),
        },
        Command::Table { inputs, out } => done((|| {
            let mut texts = Vec::new();
            for p in &inputs {
                texts.push(std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?);
            }
            emit(out.as_deref(), "table.csv", &merge_tables(&texts)?)
        })()),
        Command::DumpDensity { problem, case, k, horizon, samples, seed, out } => {
            done(dump_density(problem, case, k, horizon, samples, seed, out))
        }
    }
}
