use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heat::{SmoothingMode, SmoothingSpec};
use crate::pi_lambda::{ConvergenceStudyConfig, ErrorQuadrature, FitSolver, PiLambdaConfig};
use crate::problem::{ControlProblem, LqrSpec};
use crate::splitting::{DatumFamily, FdConfig, RateStudyConfig, StepOrder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    Table1,
    Table2,
    Table3,
    PiConvergence,
    #[serde(rename = "splitting-rate-1d")]
    SplittingRate1d,
    SplittingRateL1Torus,
    OracleSuite,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 7] = [
        ExperimentId::Table1,
        ExperimentId::Table2,
        ExperimentId::Table3,
        ExperimentId::PiConvergence,
        ExperimentId::SplittingRate1d,
        ExperimentId::SplittingRateL1Torus,
        ExperimentId::OracleSuite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::Table1 => "table1",
            ExperimentId::Table2 => "table2",
            ExperimentId::Table3 => "table3",
            ExperimentId::PiConvergence => "pi-convergence",
            ExperimentId::SplittingRate1d => "splitting-rate-1d",
            ExperimentId::SplittingRateL1Torus => "splitting-rate-l1-torus",
            ExperimentId::OracleSuite => "oracle-suite",
        }
    }

    pub fn is_table(self) -> bool {
        matches!(self, ExperimentId::Table1 | ExperimentId::Table2 | ExperimentId::Table3)
    }

    pub fn is_rate_study(self) -> bool {
        matches!(self, ExperimentId::SplittingRate1d | ExperimentId::SplittingRateL1Torus)
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|e| e.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|e| e.name()).collect();
            Error::Config(format!("unknown experiment `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

/// Drift matrix of the LQR test family `f = Ax + a`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftMatrix {
    /// `A = I`
    Identity,
    /// `A = (g^T g + I)/d`, `g` standard normal from `problem.gram_seed`.
    RandomGram,
}

impl DriftMatrix {
    pub fn label(self) -> &'static str {
        match self {
            DriftMatrix::Identity => "T1",
            DriftMatrix::RandomGram => "T2",
        }
    }

    pub fn problem(self, dim: usize, gram_seed: u64) -> Result<ControlProblem> {
        let spec = match self {
            DriftMatrix::Identity => LqrSpec::identity(dim),
            DriftMatrix::RandomGram => LqrSpec::random_gram(dim, gram_seed),
        };
        ControlProblem::lqr(&spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSection {
    pub dim: usize,
    pub eps: f64,
    pub horizon: f64,
    /// Splitting (or slice) step `h`.
    pub step: f64,
    pub gram_seed: u64,
}

impl Default for ProblemSection {
    fn default() -> Self {
        Self {
            dim: 5,
            eps: 0.01,
            horizon: 1.0,
            step: 0.1,
            gram_seed: 1,
        }
    }
}

impl ProblemSection {
    /// `T/h`, or an error when `h` does not divide `T`.
    pub fn n_steps(&self) -> Result<usize> {
        let n = self.horizon / self.step;
        let rounded = n.round();
        if !(self.step > 0.0) || rounded < 1.0 || (n - rounded).abs() > 1e-9 * n.max(1.0) {
            return Err(Error::Config(format!(
                "problem.step = {} must divide problem.horizon = {}",
                self.step, self.horizon
            )));
        }
        Ok(rounded as usize)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub mu: Vec<f64>,
    pub n: Vec<usize>,
    pub drift: Vec<DriftMatrix>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            mu: vec![0.8, 0.6, 0.4, 0.2],
            n: vec![12, 14, 16, 18, 20],
            drift: vec![DriftMatrix::Identity, DriftMatrix::RandomGram],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplittingSection {
    pub order: StepOrder,
    /// Reciprocal step sizes of the rate study.
    pub inverse_steps: Vec<usize>,
    /// Torus grid of the rate study and its reference.
    pub resolution: usize,
    pub mollify: f64,
    pub datum: DatumFamily,
    pub fd: FdConfig,
}

impl Default for SplittingSection {
    fn default() -> Self {
        let r = RateStudyConfig::default();
        Self {
            order: r.order,
            inverse_steps: r.inverse_steps,
            resolution: r.resolution,
            mollify: r.mollify,
            datum: r.datum,
            fd: r.fd,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceSection {
    pub gamma: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub quadrature: ErrorQuadrature,
}

impl Default for ConvergenceSection {
    fn default() -> Self {
        let c = ConvergenceStudyConfig::default();
        Self {
            gamma: c.gamma,
            alpha: c.alpha,
            iterations: c.iterations,
            quadrature: c.quadrature,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcceptanceSection {
    /// Largest admissible mean residual of a table cell.
    pub residual_max: f64,
    /// Table rows (values of μ) that are checked; empty checks every row.
    pub rows: Vec<f64>,
    pub runtime_budget_s: f64,
    pub ratio_max: f64,
    pub decay_max: f64,
    pub upper_slope_min: f64,
    pub upper_slope_max: f64,
    pub lower_slope_min: f64,
    pub l1_slope_min: f64,
}

impl Default for AcceptanceSection {
    fn default() -> Self {
        Self {
            residual_max: 0.05,
            rows: Vec::new(),
            runtime_budget_s: 900.0,
            ratio_max: 0.75,
            decay_max: 0.05,
            upper_slope_min: 0.33,
            upper_slope_max: 1.15,
            lower_slope_min: 0.8,
            l1_slope_min: 0.45,
        }
    }
}

/// A fully resolved experiment. Sections mirror the solver modules; the
/// top-level `seed` is authoritative and is copied into `pi_lambda.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub problem: ProblemSection,
    #[serde(default = "default_heat")]
    pub heat: SmoothingSpec,
    #[serde(default)]
    pub pi_lambda: PiLambdaConfig,
    #[serde(default)]
    pub splitting: SplittingSection,
    #[serde(default)]
    pub convergence: ConvergenceSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub acceptance: AcceptanceSection,
}

fn default_seed() -> u64 {
    1
}

fn default_heat() -> SmoothingSpec {
    SmoothingSpec {
        mode: SmoothingMode::Exact,
        ..SmoothingSpec::default_for(5)
    }
}

impl ExperimentConfig {
    /// The configuration each experiment runs with when no file is given.
    pub fn preset(id: ExperimentId) -> Self {
        let mut cfg = Self {
            experiment: id,
            seed: default_seed(),
            output: None,
            problem: ProblemSection::default(),
            heat: default_heat(),
            pi_lambda: PiLambdaConfig::default(),
            splitting: SplittingSection::default(),
            convergence: ConvergenceSection::default(),
            sweep: SweepSection::default(),
            acceptance: AcceptanceSection::default(),
        };
        match id {
            ExperimentId::Table1 => {
                cfg.problem.dim = 32;
                cfg.problem.eps = 0.0;
                cfg.problem.step = 0.01;
                cfg.acceptance.residual_max = 0.2;
                cfg.acceptance.rows = vec![0.4];
                cfg.acceptance.runtime_budget_s = 7200.0;
            }
            ExperimentId::Table2 => {}
            ExperimentId::Table3 => {
                cfg.problem.eps = 1.0;
                cfg.problem.step = 0.05;
                cfg.acceptance.residual_max = 0.06;
                cfg.acceptance.runtime_budget_s = 1800.0;
            }
            ExperimentId::PiConvergence => {
                cfg.problem.dim = 2;
                cfg.problem.eps = 0.0;
                cfg.problem.horizon = 0.1;
                cfg.problem.step = 0.02;
                cfg.pi_lambda.solver = FitSolver::LeastSquares;
                cfg.sweep = single_cell_sweep(&cfg.pi_lambda);
                cfg.acceptance.runtime_budget_s = 600.0;
            }
            ExperimentId::SplittingRate1d | ExperimentId::SplittingRateL1Torus => {
                let r = RateStudyConfig::default();
                cfg.problem.dim = 1;
                cfg.problem.eps = r.eps;
                cfg.problem.horizon = r.horizon;
                cfg.problem.step = r.horizon / *r.inverse_steps.last().unwrap_or(&1) as f64;
                cfg.sweep = single_cell_sweep(&cfg.pi_lambda);
                cfg.acceptance.runtime_budget_s = 600.0;
            }
            ExperimentId::OracleSuite => {
                cfg.sweep = single_cell_sweep(&cfg.pi_lambda);
                cfg.acceptance.runtime_budget_s = 300.0;
            }
        }
        cfg
    }

    /// Starts from the preset of the experiment, merges the TOML text of a
    /// configuration file and then `section.key=value` overrides, and
    /// validates the result. The experiment comes from `id` or, failing
    /// that, from the file's `experiment` key.
    pub fn resolve(id: Option<ExperimentId>, file: Option<&str>, overrides: &[String]) -> Result<Self> {
        let file_table: toml::Table = match file {
            Some(text) => text.parse().map_err(|e| Error::Parse(format!("config file: {e}")))?,
            None => toml::Table::new(),
        };
        let from_file = match file_table.get("experiment") {
            Some(v) => Some(
                v.as_str()
                    .ok_or_else(|| Error::Config("`experiment` must be a string".into()))?
                    .parse::<ExperimentId>()?,
            ),
            None => None,
        };
        let id = match (id, from_file) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Config(format!("config file describes `{b}` but `{a}` was requested")));
            }
            (Some(a), _) | (None, Some(a)) => a,
            (None, None) => return Err(Error::Config("no experiment named on the command line or in the config".into())),
        };
        let mut merged = match toml::Value::try_from(Self::preset(id)) {
            Ok(toml::Value::Table(t)) => t,
            Ok(_) => unreachable!("a struct serializes to a table"),
            Err(e) => return Err(Error::Parse(format!("preset: {e}"))),
        };
        merge(&mut merged, file_table);
        for o in overrides {
            apply_override(&mut merged, o)?;
        }
        let mut cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.pi_lambda.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::resolve(None, Some(text), &[])
    }

    /// The resolved configuration as TOML; [`from_toml`](Self::from_toml)
    /// reads it back unchanged.
    pub fn snapshot(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(format!("config snapshot: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let p = &self.problem;
        if p.dim == 0 {
            return bad("problem.dim must be positive".into());
        }
        if !(0.0..=1.0).contains(&p.eps) {
            return bad("problem.eps must lie in [0, 1]".into());
        }
        if !(p.horizon > 0.0) {
            return bad("problem.horizon must be positive".into());
        }
        p.n_steps()?;
        let s = &self.sweep;
        if s.mu.is_empty() || s.n.is_empty() || s.drift.is_empty() {
            return bad("sweep.mu, sweep.n and sweep.drift must be nonempty".into());
        }
        if let Some(m) = s.mu.iter().find(|m| !(0.0..=1.0).contains(*m)) {
            return bad(format!("sweep.mu entries must lie in [0, 1], got {m}"));
        }
        if s.n.contains(&0) {
            return bad("sweep.n entries must be positive".into());
        }
        if self.pi_lambda.seed != self.seed {
            return bad("pi_lambda.seed must equal the top-level seed".into());
        }
        self.pi_lambda.validate()?;
        self.heat.validate()?;
        self.splitting.fd.validate()?;
        if self.acceptance.rows.iter().any(|r| !s.mu.contains(r)) {
            return bad("acceptance.rows must be values listed in sweep.mu".into());
        }
        if !(self.acceptance.runtime_budget_s > 0.0) {
            return bad("acceptance.runtime_budget_s must be positive".into());
        }
        if self.experiment.is_rate_study() {
            if p.dim != 1 {
                return bad("the splitting rate studies run in one dimension".into());
            }
            if !(p.eps > 0.0) {
                return bad("the splitting rate studies need eps > 0".into());
            }
            if self.splitting.inverse_steps.len() < 3 {
                return bad("splitting.inverse_steps needs at least three step sizes for a fit".into());
            }
            self.rate_study().fd.validate()?;
        }
        if self.experiment == ExperimentId::PiConvergence && self.convergence.iterations < 3 {
            return bad("convergence.iterations must be at least 3".into());
        }
        Ok(())
    }

    pub fn rate_study(&self) -> RateStudyConfig {
        RateStudyConfig {
            eps: self.problem.eps,
            horizon: self.problem.horizon,
            inverse_steps: self.splitting.inverse_steps.clone(),
            resolution: self.splitting.resolution,
            mollify: self.splitting.mollify,
            datum: self.splitting.datum,
            order: self.splitting.order,
            fd: self.splitting.fd,
        }
    }

    pub fn convergence_study(&self) -> Result<ConvergenceStudyConfig> {
        Ok(ConvergenceStudyConfig {
            horizon: self.problem.horizon,
            n_slices: self.problem.n_steps()?,
            gamma: self.convergence.gamma,
            alpha: self.convergence.alpha,
            iterations: self.convergence.iterations,
            quadrature: self.convergence.quadrature.clone(),
            ratio_threshold: self.acceptance.ratio_max,
        })
    }
}

fn single_cell_sweep(pi: &PiLambdaConfig) -> SweepSection {
    SweepSection {
        mu: vec![pi.mu],
        n: vec![pi.n_trajectories],
        drift: vec![DriftMatrix::Identity],
    }
}

/// Recursive merge; tables merge key by key, everything else is replaced.
fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

/// Applies `section.key=value` (or `key=value` at the top level). The value
/// is read as a TOML value when it parses as one and as a string otherwise.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form section.key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut node = table;
    for k in parents {
        let entry = node.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override `{assignment}`: `{k}` is not a section"))),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}
