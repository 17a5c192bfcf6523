//! Experiment configuration files.
//!
//! A config is a TOML document. Every section has defaults equal to the
//! desk-scale settings, so a minimal file only names the problem and the
//! algorithm:
//!
//! ```toml
//! algorithm = 1
//! seed = 0
//! cases = [1, 4]
//!
//! [problem]
//! kind = "systemic"   # systemic | minmax | mean-variance
//! horizon = 0.2
//!
//! [train]
//! m_batch = 5
//! n_particles = 10000
//! epochs = 3000
//! k_bins = 50
//! dt = 0.02
//!
//! [train.net]
//! variant = "bin"     # bin | cylindrical
//! hidden = [20, 20]
//!
//! [eval]
//! particles = 10000
//! clouds = 10
//!
//! [output]
//! dir = "out"
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use mfc_core::dp_solvers::{TrainConfig, Variant};
use mfc_core::measure::InitialDistribution;
use mfc_core::problems::{
    meanvar_case, minmax_case, minmax_reference, systemic_case, MeanVarParams, MinMaxParams, ProblemSpec,
    SystemicParams, BsdeSpec, MEANVAR_DOMAIN, SYSTEMIC_DOMAIN,
};
use serde::{Deserialize, Serialize};

/// Benchmark problem and its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProblemConfig {
    Systemic(SystemicParams),
    Minmax(MinMaxParams),
    MeanVariance(MeanVarParams),
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig::Systemic(SystemicParams::default())
    }
}

impl ProblemConfig {
    pub fn id(&self) -> &'static str {
        match self {
            ProblemConfig::Systemic(_) => "systemic",
            ProblemConfig::Minmax(_) => "minmax",
            ProblemConfig::MeanVariance(_) => "mean-variance",
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            ProblemConfig::Systemic(p) => p.horizon,
            ProblemConfig::Minmax(p) => p.horizon,
            ProblemConfig::MeanVariance(p) => p.horizon,
        }
    }

    pub fn default_domain(&self) -> (f64, f64) {
        match self {
            ProblemConfig::Systemic(_) => SYSTEMIC_DOMAIN,
            ProblemConfig::Minmax(p) => p.default_domain(),
            ProblemConfig::MeanVariance(_) => MEANVAR_DOMAIN,
        }
    }

    pub fn validate(&self) -> mfc_core::Result<()> {
        match self {
            ProblemConfig::Systemic(p) => p.validate(),
            ProblemConfig::Minmax(p) => p.validate(),
            ProblemConfig::MeanVariance(p) => p.validate(),
        }
    }

    pub fn case_ids(&self) -> Vec<usize> {
        match self {
            ProblemConfig::Minmax(_) => vec![1, 2, 3],
            _ => (1..=6).collect(),
        }
    }

    pub fn case(&self, case: usize) -> mfc_core::Result<InitialDistribution> {
        match self {
            ProblemConfig::Systemic(_) => systemic_case(case),
            ProblemConfig::Minmax(p) => minmax_case(p, case),
            ProblemConfig::MeanVariance(_) => meanvar_case(case),
        }
    }

    /// Analytic value where one exists, else the stored reference.
    pub fn reference(&self, case: usize) -> mfc_core::Result<Option<f64>> {
        let law = self.case(case)?;
        Ok(match self {
            ProblemConfig::Systemic(p) => Some(p.value(law.variance())?),
            ProblemConfig::Minmax(p) => minmax_reference(p.horizon, case),
            ProblemConfig::MeanVariance(p) => Some(p.value(law.mean(), law.variance())),
        })
    }

    pub fn problem(&self, domain: (f64, f64)) -> ProblemSpec {
        match self {
            ProblemConfig::Systemic(p) => p.problem(domain),
            ProblemConfig::Minmax(p) => p.problem(domain),
            ProblemConfig::MeanVariance(p) => p.problem(domain),
        }
    }

    /// The adjoint-system form, absent when the control enters the volatility.
    pub fn bsde(&self, domain: (f64, f64)) -> Option<BsdeSpec> {
        match self {
            ProblemConfig::Systemic(p) => Some(p.bsde(domain)),
            ProblemConfig::Minmax(p) => Some(p.bsde(domain)),
            ProblemConfig::MeanVariance(_) => None,
        }
    }
}

/// Monte Carlo settings for evaluating trained solutions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Particles per evaluation cloud.
    pub particles: usize,
    /// Independent clouds per case (DP algorithms). BSDE algorithms average
    /// `𝒴` at `t_0` over `particles × clouds` draws.
    pub clouds: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { particles: 10_000, clouds: 10, seed: 99 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// File name of the results table inside `dir`.
    pub table: String,
    pub checkpoints: bool,
    pub loss_curve: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), table: "results.csv".into(), checkpoints: true, loss_curve: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    /// Truncation domain `[lo, hi]` of the bin grid; the problem's default when absent.
    pub domain: Option<[f64; 2]>,
    /// Algorithm number, 1 to 8.
    pub algorithm: u8,
    /// Label of the `Method` column; derived from the algorithm and network when absent.
    pub method: Option<String>,
    /// Initial laws to evaluate; all cases of the problem when empty.
    pub cases: Vec<usize>,
    pub seed: u64,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: ProblemConfig::default(),
            domain: None,
            algorithm: 1,
            method: None,
            cases: Vec::new(),
            seed: 0,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Io(PathBuf, std::io::Error),
    Parse(String),
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(p, e) => write!(f, "{}: {e}", p.display()),
            ConfigError::Parse(e) => write!(f, "config parse error: {e}"),
            ConfigError::Invalid(e) => write!(f, "invalid config: {e}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Whether the algorithm trains through the adjoint BSDE.
pub fn is_bsde_algorithm(algorithm: u8) -> bool {
    (4..=8).contains(&algorithm)
}

pub fn algorithm_name(algorithm: u8) -> &'static str {
    match algorithm {
        1 => "global control",
        2 => "policy iteration",
        3 => "value iteration",
        4 => "deep backward",
        5 => "multistep backward",
        6 => "deep MKV global",
        7 => "global-local",
        8 => "global multistep",
        _ => "unknown",
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain.map(|[a, b]| (a, b)).unwrap_or_else(|| self.problem.default_domain())
    }

    pub fn cases(&self) -> Vec<usize> {
        if self.cases.is_empty() {
            self.problem.case_ids()
        } else {
            self.cases.clone()
        }
    }

    /// Training settings with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn method_label(&self) -> String {
        if let Some(m) = &self.method {
            return m.clone();
        }
        let net = match self.train.net.variant {
            Variant::Bin => "Bins",
            Variant::Cylindrical => "Cylinder",
        };
        format!("Alg{} {net}", self.algorithm)
    }

    /// Checks everything that can be checked before training starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if !(1..=8).contains(&self.algorithm) {
            return invalid(format!("algorithm must be 1 to 8, got {}", self.algorithm));
        }
        self.problem.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if is_bsde_algorithm(self.algorithm) && self.problem.bsde(self.domain()).is_none() {
            let spec = self.problem.problem(self.domain());
            let why = if spec.coeffs.vol_controlled() { "vol_controlled: the control enters the volatility" } else { "no BSDE form" };
            return invalid(format!(
                "algorithm {} ({}) needs a BSDE form, but problem {} is {why}",
                self.algorithm,
                algorithm_name(self.algorithm),
                self.problem.id()
            ));
        }
        let (lo, hi) = self.domain();
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return invalid(format!("domain [{lo}, {hi}] is empty"));
        }
        for c in self.cases() {
            self.problem.case(c).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.eval.particles == 0 || self.eval.clouds == 0 {
            return invalid("eval particles and clouds must be positive".into());
        }
        if self.method_label().contains([',', '\n', '"']) {
            return invalid("method label may not contain commas, quotes or newlines".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_desk_defaults() {
        let c = ExperimentConfig::from_toml("algorithm = 4\n[problem]\nkind = \"systemic\"\n").unwrap();
        assert_eq!(c.algorithm, 4);
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.cases(), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(c.domain(), SYSTEMIC_DOMAIN);
        c.validate().unwrap();
    }

    #[test]
    fn problem_parameters_override_defaults() {
        let c = ExperimentConfig::from_toml("[problem]\nkind = \"mean-variance\"\nhorizon = 0.5\n").unwrap();
        assert_eq!(c.problem, ProblemConfig::MeanVariance(MeanVarParams { horizon: 0.5, ..Default::default() }));
    }

    #[test]
    fn toml_round_trip() {
        let mut c = ExperimentConfig { algorithm: 7, cases: vec![2, 5], domain: Some([-1.0, 1.0]), ..Default::default() };
        c.train.net.variant = Variant::Cylindrical;
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn mean_variance_rejects_bsde_algorithms() {
        for alg in 4..=8 {
            let c = ExperimentConfig {
                problem: ProblemConfig::MeanVariance(MeanVarParams::default()),
                algorithm: alg,
                ..Default::default()
            };
            let e = c.validate().unwrap_err().to_string();
            assert!(e.contains("vol_controlled"), "{e}");
        }
        for alg in 1..=3 {
            let c = ExperimentConfig {
                problem: ProblemConfig::MeanVariance(MeanVarParams::default()),
                algorithm: alg,
                ..Default::default()
            };
            c.validate().unwrap();
        }
    }

    #[test]
    fn unknown_case_and_algorithm_are_rejected() {
        let c = ExperimentConfig { cases: vec![7], ..Default::default() };
        assert!(c.validate().is_err());
        let c = ExperimentConfig { problem: ProblemConfig::Minmax(MinMaxParams::default()), cases: vec![4], ..Default::default() };
        assert!(c.validate().is_err());
        let c = ExperimentConfig { algorithm: 9, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn method_label_follows_algorithm_and_variant() {
        let mut c = ExperimentConfig { algorithm: 2, ..Default::default() };
        assert_eq!(c.method_label(), "Alg2 Bins");
        c.train.net.variant = Variant::Cylindrical;
        assert_eq!(c.method_label(), "Alg2 Cylinder");
        c.method = Some("a,b".into());
        assert!(c.validate().is_err());
    }
}
