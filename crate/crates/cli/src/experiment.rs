//! Training runs driven by an [`ExperimentConfig`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mfc_core::bsde_solvers::{
    train_deep_backward, train_deep_mkv_global, train_global_local, train_global_multistep, train_multistep_backward,
    BsdeNets,
};
use mfc_core::dp_solvers::{
    loss_curve_csv, train_global_control, train_policy_iteration, train_value_iteration, ActorCritic, LossPoint,
    ReportRow, SolverReport,
};
use mfc_core::dynamics::{evaluate_controls, Controls};
use mfc_core::mfnn::{save_checkpoint, Field, MeanFieldNet, PreparedNet};
use mfc_core::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::table::emit_table;

#[derive(Debug)]
pub enum ExperimentError {
    Config(ConfigError),
    /// Training or evaluation blew up; the report holds the cases finished before.
    Diverged { report: SolverReport, source: Error },
    Core(Error),
    Io(PathBuf, std::io::Error),
}

impl fmt::Display for ExperimentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExperimentError::Config(e) => write!(f, "{e}"),
            ExperimentError::Diverged { report, source } => {
                write!(f, "diverged after {} evaluated cases: {source}", report.rows.len())
            }
            ExperimentError::Core(e) => write!(f, "{e}"),
            ExperimentError::Io(p, e) => write!(f, "{}: {e}", p.display()),
        }
    }
}

impl std::error::Error for ExperimentError {}

impl From<ConfigError> for ExperimentError {
    fn from(e: ConfigError) -> Self {
        ExperimentError::Config(e)
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::TrainingDiverged { .. } | Error::SimulationDiverged { .. })
}

/// Trained networks of any of the eight algorithms.
#[derive(Clone, Debug)]
pub enum Model {
    Global(MeanFieldNet),
    PerStep(Vec<MeanFieldNet>),
    ActorCritic(ActorCritic),
    Bsde(BsdeNets),
}

impl Model {
    /// Networks with their checkpoint file stems.
    pub fn named_nets(&self) -> Vec<(String, &MeanFieldNet)> {
        fn steps<'a>(prefix: &str, nets: &'a [MeanFieldNet]) -> Vec<(String, &'a MeanFieldNet)> {
            nets.iter().enumerate().map(|(i, n)| (format!("{prefix}_{i:03}"), n)).collect()
        }
        match self {
            Model::Global(n) => vec![("control".into(), n)],
            Model::PerStep(v) => steps("control", v),
            Model::ActorCritic(ac) => {
                let mut v = steps("actor", &ac.actors);
                v.extend(steps("critic", &ac.critics));
                v
            }
            Model::Bsde(BsdeNets::PerStep { y, z }) => {
                let mut v = steps("y", y);
                v.extend(steps("z", z));
                v
            }
            Model::Bsde(BsdeNets::Carried { u, z }) => vec![("u".into(), u), ("z".into(), z)],
            Model::Bsde(BsdeNets::Global { y, z }) => vec![("y".into(), y), ("z".into(), z)],
        }
    }
}

/// Runs the configured trainer.
pub fn train(cfg: &ExperimentConfig) -> Result<(Model, Vec<LossPoint>), Error> {
    let tc = cfg.train_config();
    let domain = cfg.domain();
    if cfg.algorithm <= 3 {
        let problem = cfg.problem.problem(domain);
        return match cfg.algorithm {
            1 => train_global_control(&problem, &tc).map(|t| (Model::Global(t.model), t.losses)),
            2 => train_policy_iteration(&problem, &tc).map(|t| (Model::PerStep(t.model), t.losses)),
            _ => train_value_iteration(&problem, &tc).map(|t| (Model::ActorCritic(t.model), t.losses)),
        };
    }
    let spec = cfg
        .problem
        .bsde(domain)
        .ok_or_else(|| Error::InvalidParameter(format!("{} has no BSDE form", cfg.problem.id())))?;
    let trained = match cfg.algorithm {
        4 => train_deep_backward(&spec, &tc),
        5 => train_multistep_backward(&spec, &tc),
        6 => train_deep_mkv_global(&spec, &tc),
        7 => train_global_local(&spec, &tc),
        8 => train_global_multistep(&spec, &tc),
        a => return Err(Error::InvalidParameter(format!("unknown algorithm {a}"))),
    }?;
    Ok((Model::Bsde(trained.model), trained.losses))
}

/// `(value, standard error)` of the trained model for one case. DP models are
/// scored by the Monte Carlo cost of their controls, BSDE models by `E[Y_0]`.
pub fn evaluate_case(cfg: &ExperimentConfig, model: &Model, case: usize) -> Result<(f64, f64), Error> {
    let law = cfg.problem.case(case)?;
    let tc = cfg.train_config();
    let domain = cfg.domain();
    let bins = tc.bins(domain)?;
    let ev = &cfg.eval;
    let problem = cfg.problem.problem(domain);
    let grid = tc.grid(problem.horizon)?;
    let run = |controls: Controls<'_>| {
        evaluate_controls(&problem, controls, &law, &bins, &grid, ev.particles, ev.clouds, ev.seed)
    };
    match model {
        Model::Global(n) => run(Controls::Global(&n.prepare())),
        Model::PerStep(nets) | Model::ActorCritic(ActorCritic { actors: nets, .. }) => {
            let prepared: Vec<PreparedNet<'_>> = nets.iter().map(MeanFieldNet::prepare).collect();
            let fields: Vec<&dyn Field> = prepared.iter().map(|p| p as &dyn Field).collect();
            run(Controls::PerStep(&fields))
        }
        Model::Bsde(nets) => nets.value(&law, &bins, ev.particles * ev.clouds, ev.seed),
    }
}

fn write(path: &Path, text: &str) -> Result<(), ExperimentError> {
    std::fs::write(path, text).map_err(|e| ExperimentError::Io(path.to_path_buf(), e))
}

/// Trains per `cfg`, evaluates every case and writes the table, the resolved
/// config, the loss curve and the checkpoints into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<SolverReport, ExperimentError> {
    cfg.validate()?;
    let dir = &cfg.output.dir;
    std::fs::create_dir_all(dir).map_err(|e| ExperimentError::Io(dir.clone(), e))?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;

    let mut report = SolverReport { rows: Vec::new(), config: cfg.train_config() };
    let table_path = dir.join(&cfg.output.table);
    let fail = |report: SolverReport, e: Error| -> Result<SolverReport, ExperimentError> {
        if is_divergence(&e) {
            write(&table_path, &emit_table(&report.rows))?;
            Err(ExperimentError::Diverged { report, source: e })
        } else {
            Err(ExperimentError::Core(e))
        }
    };

    let start = Instant::now();
    let (model, losses) = match train(cfg) {
        Ok(m) => m,
        Err(e) => return fail(report, e),
    };
    let train_secs = start.elapsed().as_secs_f64();
    if cfg.output.loss_curve {
        write(&dir.join("losses.csv"), &loss_curve_csv(&losses))?;
    }
    if cfg.output.checkpoints {
        for (stem, net) in model.named_nets() {
            let path = dir.join(format!("{stem}.ckpt"));
            save_checkpoint(net, &path).map_err(|e| match e {
                Error::Io(io) => ExperimentError::Io(path.clone(), io),
                e => ExperimentError::Core(e),
            })?;
        }
    }

    let method = cfg.method_label();
    for case in cfg.cases() {
        let t0 = Instant::now();
        let value = match evaluate_case(cfg, &model, case) {
            Ok((v, _)) if v.is_finite() => v,
            Ok(_) => return fail(report, Error::SimulationDiverged { step: 0 }),
            Err(e) => return fail(report, e),
        };
        let reference = cfg.problem.reference(case).map_err(ExperimentError::Core)?;
        let wall = train_secs + t0.elapsed().as_secs_f64();
        report.rows.push(ReportRow::new(&method, cfg.train.k_bins, cfg.train.dt, case, value, reference, wall));
    }
    write(&table_path, &emit_table(&report.rows))?;
    Ok(report)
}
