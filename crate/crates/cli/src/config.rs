//! Experiment configuration files.
//!
//! A config is a JSON object. It either names a preset (`"toy"` or
//! `"windcase-synthetic"`) with a set family, or spells the problem out:
//!
//! ```json
//! {
//!   "grid": {"regular": {"start": 0.0, "step": 1.0, "count": 5}},
//!   "strata": {"equal_contiguous": 2},
//!   "budget": 20,
//!   "reference": "average_of_nominals",
//!   "models": [
//!     {"nominal": {"pmf": [0.1, 0.2, 0.4, 0.2, 0.1]},
//!      "set": {"type": "l2", "gamma": 0.05}}
//!   ],
//!   "simulator": {"kind": "table", "means": [0.0, 0.1, 0.2, 0.5, 0.9]}
//! }
//! ```
//!
//! Grids: `{"points": [..]}`, `{"regular": {start, step, count}}` or
//! `{"affine_integers": {first, last, shift, scale}}` (points `(i - shift) / scale`).
//! Strata: `{"equal_contiguous": K}` or `{"index_sets": [[..], ..]}`.
//! Reference: `"average_of_nominals"` or `{"pmf": [..]}`.
//! Nominals: `{"pmf": [..]}`, `{"binomial": {trials, p, shift, scale}}` or
//! `{"rayleigh": {sigma, delta}}`.
//! Sets (`"type"`): `l2` and `wasserstein1` with optional `gamma`; `moment` with
//! optional `gamma1`, `gamma2_lb`, `gamma2_ub`; `binomial` with `shift`, `scale`
//! and `theta: [[trials, p], ..]`; `rayleigh_shift` with `theta: [[sigma, delta], ..]`.
//! Simulators (`"kind"`): `toy` with `threshold`, `windcase-synthetic`, or
//! `table` with `means`.
//!
//! Both forms accept `budget`, `pilot_per_point`, `bo`, `inner`, `seed` and
//! `output_dir`. The full schema is `schema/experiment.schema.json`.

use std::path::PathBuf;
use std::sync::Arc;

use drstrat_core::ambiguity::{default_wasserstein_gamma, AmbiguitySet, DEFAULT_L2_GAMMA, DEFAULT_MOMENT_GAMMAS};
use drstrat_core::bo::BoConfig;
use drstrat_core::dist::{
    discretized_rayleigh_pmf, reference_from_nominals, scaled_binomial_pmf, Grid, Pmf, Stratification,
};
use drstrat_core::estimators::ConditionalMeanTable;
use drstrat_core::inner::InnerConfig;
use drstrat_core::problem::{presets, Problem, SetFamily};
use drstrat_core::sim::{pilot_estimate_cond_means, SimulatorSpec};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    pub family: Option<SetFamily>,
    pub grid: Option<GridSpec>,
    pub strata: Option<StrataSpec>,
    pub budget: Option<u64>,
    pub reference: Option<ReferenceSpec>,
    pub models: Option<Vec<ModelSpec>>,
    pub simulator: Option<SimulatorConfig>,
    /// Estimate conditional means from this many simulator runs per grid point
    /// instead of using the exact table.
    pub pilot_per_point: Option<usize>,
    #[serde(default)]
    pub bo: BoConfig,
    #[serde(default)]
    pub inner: InnerSettings,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GridSpec {
    Points(Vec<f64>),
    Regular { start: f64, step: f64, count: usize },
    AffineIntegers { first: i64, last: i64, shift: f64, scale: f64 },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StrataSpec {
    EqualContiguous(usize),
    IndexSets(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    AverageOfNominals,
    Pmf(Vec<f64>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub nominal: NominalSpec,
    pub set: SetSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NominalSpec {
    Pmf(Vec<f64>),
    Binomial { trials: u64, p: f64, shift: f64, scale: f64 },
    Rayleigh { sigma: f64, delta: f64 },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SetSpec {
    L2 { gamma: Option<f64> },
    Wasserstein1 { gamma: Option<f64> },
    Moment { gamma1: Option<f64>, gamma2_lb: Option<f64>, gamma2_ub: Option<f64> },
    Binomial { shift: f64, scale: f64, theta: Vec<(u64, f64)> },
    RayleighShift { theta: Vec<(f64, f64)> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum SimulatorConfig {
    #[serde(rename = "toy")]
    Toy { threshold: f64 },
    #[serde(rename = "windcase-synthetic")]
    WindcaseSynthetic,
    #[serde(rename = "table")]
    Table { means: Vec<f64> },
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerSettings {
    pub starts: usize,
    pub max_iterations: usize,
}

impl Default for InnerSettings {
    fn default() -> Self {
        let d = InnerConfig::default();
        Self { starts: d.starts, max_iterations: d.max_iterations }
    }
}

/// A validated experiment ready to run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub problem: Problem,
    pub bo: BoConfig,
    pub inner: InnerConfig,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

/// Parses and validates `source`. Errors carry the 1-based line they refer to.
pub fn load(source: &str, seed_override: Option<u64>) -> Result<Experiment, CliError> {
    let config: ExperimentConfig = serde_json::from_str(source).map_err(|e| CliError::Config {
        file: None,
        line: e.line(),
        message: strip_position(&e.to_string()),
    })?;
    config.resolve(source, seed_override)
}

fn strip_position(message: &str) -> String {
    match message.rfind(" at line ") {
        Some(i) => message[..i].to_string(),
        None => message.to_string(),
    }
}

/// Line of the first occurrence of `"key"` in `source`, or 1.
fn key_line(source: &str, key: &str) -> usize {
    let needle = format!("\"{key}\"");
    source.lines().position(|l| l.contains(&needle)).map_or(1, |i| i + 1)
}

const EXPLICIT_FIELDS: [&str; 5] = ["grid", "strata", "reference", "models", "simulator"];

impl ExperimentConfig {
    fn resolve(self, source: &str, seed_override: Option<u64>) -> Result<Experiment, CliError> {
        let at = |key: &str, message: String| CliError::Config { file: None, line: key_line(source, key), message };
        let seed = seed_override.unwrap_or(self.seed);
        let mut problem = match &self.preset {
            Some(name) => {
                let given = [
                    self.grid.is_some(),
                    self.strata.is_some(),
                    self.reference.is_some(),
                    self.models.is_some(),
                    self.simulator.is_some(),
                ];
                if let Some(i) = given.iter().position(|&g| g) {
                    let field = EXPLICIT_FIELDS[i];
                    return Err(at(field, format!("\"{field}\" cannot be combined with \"preset\"")));
                }
                let family = self.family.unwrap_or(SetFamily::L2);
                presets::by_name(name, family).map_err(|e| at("preset", e.to_string()))?
            }
            None => {
                if self.family.is_some() {
                    return Err(at("family", "\"family\" is only valid together with \"preset\"".into()));
                }
                self.explicit_problem(source)?
            }
        };
        if let Some(budget) = self.budget {
            problem = Problem::new(
                problem.strat.clone(),
                budget,
                problem.reference.clone(),
                problem.sets.clone(),
                problem.simulator.clone(),
                problem.means.clone(),
            )
            .map_err(|e| at("budget", e.to_string()))?;
        }
        if let Some(per_point) = self.pilot_per_point {
            let means = pilot_estimate_cond_means(&problem.simulator, &problem.grid, per_point, seed)
                .map_err(|e| at("pilot_per_point", e.to_string()))?;
            problem = Problem::new(
                problem.strat.clone(),
                problem.budget,
                problem.reference.clone(),
                problem.sets.clone(),
                problem.simulator.clone(),
                means,
            )
            .map_err(|e| at("pilot_per_point", e.to_string()))?;
        }
        let bo = BoConfig { seed, ..self.bo };
        bo.validate(problem.num_strata(), problem.budget).map_err(|e| at("bo", e.to_string()))?;
        if self.inner.starts == 0 || self.inner.max_iterations == 0 {
            return Err(at("inner", "inner starts and max_iterations must be positive".into()));
        }
        let inner = InnerConfig { starts: self.inner.starts, max_iterations: self.inner.max_iterations, seed };
        // Support and shape checks between the reference and every set.
        problem.inner_solver(inner).map_err(|e| at("models", e.to_string()))?;
        Ok(Experiment { problem, bo, inner, seed, output_dir: self.output_dir })
    }

    fn explicit_problem(&self, source: &str) -> Result<Problem, CliError> {
        let at = |key: &str, message: String| CliError::Config { file: None, line: key_line(source, key), message };
        let missing = |key: &str| at(key, format!("missing field \"{key}\" (or give a \"preset\")"));
        let grid = match self.grid.as_ref().ok_or_else(|| missing("grid"))? {
            GridSpec::Points(p) => Grid::new(p.clone()),
            GridSpec::Regular { start, step, count } => Grid::regular(*start, *step, *count),
            GridSpec::AffineIntegers { first, last, shift, scale } => {
                Grid::affine_integers(*first, *last, *shift, *scale)
            }
        }
        .map_err(|e| at("grid", e.to_string()))?;
        let strat = match self.strata.as_ref().ok_or_else(|| missing("strata"))? {
            StrataSpec::EqualContiguous(k) => Stratification::equal_contiguous(grid.len(), *k),
            StrataSpec::IndexSets(sets) => Stratification::new(sets.clone(), grid.len()),
        }
        .map_err(|e| at("strata", e.to_string()))?;
        let budget = self.budget.ok_or_else(|| missing("budget"))?;
        let models = self.models.as_ref().ok_or_else(|| missing("models"))?;
        if models.is_empty() {
            return Err(at("models", "at least one model is required".into()));
        }
        let sets = models
            .iter()
            .enumerate()
            .map(|(m, spec)| build_set(&grid, spec).map_err(|e| at("models", format!("models[{m}]: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let reference = match self.reference.as_ref().unwrap_or(&ReferenceSpec::AverageOfNominals) {
            ReferenceSpec::AverageOfNominals => {
                let nominals: Vec<Pmf> = sets.iter().map(|s| s.nominal().clone()).collect();
                reference_from_nominals(&nominals)
            }
            ReferenceSpec::Pmf(mass) => Pmf::new(grid.clone(), mass.clone()),
        }
        .map_err(|e| at("reference", e.to_string()))?;
        let simulator = match self.simulator.as_ref().ok_or_else(|| missing("simulator"))? {
            SimulatorConfig::Toy { threshold } => SimulatorSpec::toy(*threshold, &grid),
            SimulatorConfig::WindcaseSynthetic => {
                ConditionalMeanTable::new(grid.points().iter().map(|&x| presets::synthetic_wind_mean(x)).collect())
                    .map(|means| SimulatorSpec::TableBernoulli { means })
            }
            SimulatorConfig::Table { means } => {
                ConditionalMeanTable::new(means.clone()).map(|means| SimulatorSpec::TableBernoulli { means })
            }
        }
        .map_err(|e| at("simulator", e.to_string()))?;
        let means = simulator.exact_means(&grid).map_err(|e| at("simulator", e.to_string()))?;
        Problem::new(strat, budget, reference, sets, simulator, means).map_err(|e| at("models", e.to_string()))
    }
}

fn build_set(grid: &Arc<Grid>, spec: &ModelSpec) -> drstrat_core::Result<AmbiguitySet> {
    let nominal = match &spec.nominal {
        NominalSpec::Pmf(mass) => Pmf::new(grid.clone(), mass.clone())?,
        NominalSpec::Binomial { trials, p, shift, scale } => {
            scaled_binomial_pmf(grid.clone(), *trials, *p, *shift, *scale)?
        }
        NominalSpec::Rayleigh { sigma, delta } => discretized_rayleigh_pmf(grid.clone(), *sigma, *delta)?,
    };
    match &spec.set {
        SetSpec::L2 { gamma } => AmbiguitySet::l2(nominal, gamma.unwrap_or(DEFAULT_L2_GAMMA)),
        SetSpec::Wasserstein1 { gamma } => {
            let gamma = gamma.unwrap_or_else(|| default_wasserstein_gamma(grid));
            AmbiguitySet::wasserstein1(nominal, gamma)
        }
        SetSpec::Moment { gamma1, gamma2_lb, gamma2_ub } => {
            let (g1, lb, ub) = DEFAULT_MOMENT_GAMMAS;
            AmbiguitySet::moment(nominal, gamma1.unwrap_or(g1), gamma2_lb.unwrap_or(lb), gamma2_ub.unwrap_or(ub))
        }
        SetSpec::Binomial { shift, scale, theta } => AmbiguitySet::binomial(nominal, *shift, *scale, theta.clone()),
        SetSpec::RayleighShift { theta } => AmbiguitySet::rayleigh_shift(nominal, theta.clone()),
    }
}
