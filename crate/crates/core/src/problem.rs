//! A complete allocation problem and the two shipped presets.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ambiguity::{default_wasserstein_gamma, AmbiguitySet, DEFAULT_L2_GAMMA, DEFAULT_MOMENT_GAMMAS};
use crate::dist::{
    discretized_rayleigh_pmf, reference_from_nominals, scaled_binomial_pmf, strata_probabilities, Grid, Pmf,
    Stratification,
};
use crate::error::{Error, Result};
use crate::estimators::ConditionalMeanTable;
use crate::inner::{InnerConfig, InnerSolver};
use crate::sim::SimulatorSpec;

/// Ambiguity set family shorthand used by the presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetFamily {
    L2,
    Wasserstein1,
    Parametric,
    Moment,
}

impl SetFamily {
    pub const ALL: [SetFamily; 4] = [Self::L2, Self::Wasserstein1, Self::Parametric, Self::Moment];

    pub fn name(self) -> &'static str {
        match self {
            Self::L2 => "l2",
            Self::Wasserstein1 => "wasserstein1",
            Self::Parametric => "parametric",
            Self::Moment => "moment",
        }
    }
}

impl fmt::Display for SetFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SetFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown set family {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub grid: Arc<Grid>,
    pub strat: Stratification,
    pub budget: u64,
    pub reference: Pmf,
    pub sets: Vec<AmbiguitySet>,
    pub simulator: SimulatorSpec,
    pub means: ConditionalMeanTable,
}

impl Problem {
    /// Validates the pieces against each other. `means` are the conditional
    /// output means the allocation is optimized for (exact or pilot-estimated).
    pub fn new(
        strat: Stratification,
        budget: u64,
        reference: Pmf,
        sets: Vec<AmbiguitySet>,
        simulator: SimulatorSpec,
        means: ConditionalMeanTable,
    ) -> Result<Self> {
        let grid = reference.grid().clone();
        strat.check_grid(&grid)?;
        strata_probabilities(&reference, &strat)?;
        if sets.is_empty() {
            return Err(Error::InvalidAmbiguitySet("no input models".into()));
        }
        for set in &sets {
            set.nominal().ensure_same_grid(&reference)?;
        }
        if means.len() != grid.len() {
            return Err(Error::GridMismatch);
        }
        if budget < strat.num_strata() as u64 {
            return Err(Error::InfeasibleBudget { budget: budget as f64, strata: strat.num_strata(), floor: 1.0 });
        }
        Ok(Self { grid, strat, budget, reference, sets, simulator, means })
    }

    pub fn num_strata(&self) -> usize {
        self.strat.num_strata()
    }

    pub fn nominals(&self) -> Vec<Pmf> {
        self.sets.iter().map(|s| s.nominal().clone()).collect()
    }

    pub fn inner_solver(&self, config: InnerConfig) -> Result<InnerSolver> {
        InnerSolver::new(self.sets.clone(), &self.reference, &self.strat, &self.means, config)
    }

    /// Same problem with different ambiguity sets.
    pub fn with_sets(&self, sets: Vec<AmbiguitySet>) -> Result<Self> {
        Self::new(
            self.strat.clone(),
            self.budget,
            self.reference.clone(),
            sets,
            self.simulator.clone(),
            self.means.clone(),
        )
    }
}

pub mod presets {
    //! The scaled-binomial toy example and a synthetic wind-speed case.
    //!
    //! The wind preset keeps the grid, strata, budget and Rayleigh nominals of
    //! the turbine study, but its conditional exceedance probabilities are a
    //! synthetic sigmoid, not aeroelastic simulation output.

    use super::*;

    pub const TOY_SHIFT: f64 = 40.0;
    pub const TOY_THRESHOLD: f64 = 5.2;
    pub const TOY_BUDGET: u64 = 100;
    pub const TOY_STRATA: usize = 7;
    /// `(trials, success probability)` of the two nominal binomials.
    pub const TOY_NOMINALS: [(u64, f64); 2] = [(75, 0.55), (85, 0.45)];

    pub fn toy_scale() -> f64 {
        20f64.sqrt()
    }

    /// `x_i = (i - 40) / sqrt(20)`, `i = 23..=57`.
    pub fn toy_grid() -> Arc<Grid> {
        Grid::affine_integers(23, 57, TOY_SHIFT, toy_scale()).expect("toy grid")
    }

    pub fn toy_nominals(grid: &Arc<Grid>) -> Vec<Pmf> {
        TOY_NOMINALS
            .iter()
            .map(|&(n, p)| scaled_binomial_pmf(grid.clone(), n, p, TOY_SHIFT, toy_scale()).expect("toy nominal"))
            .collect()
    }

    /// Trials offsets {-4, -2, 0, 2, 4} crossed with success offsets
    /// {-0.02, -0.01, 0, 0.01, 0.02} around the nominal.
    pub fn binomial_theta(n: u64, p: f64) -> Vec<(u64, f64)> {
        let mut theta = Vec::with_capacity(25);
        for dn in [-4i64, -2, 0, 2, 4] {
            for dp in [-0.02, -0.01, 0.0, 0.01, 0.02] {
                theta.push(((n as i64 + dn) as u64, p + dp));
            }
        }
        theta
    }

    pub fn toy_sets(family: SetFamily, grid: &Arc<Grid>) -> Result<Vec<AmbiguitySet>> {
        let nominals = toy_nominals(grid);
        nominals
            .into_iter()
            .zip(TOY_NOMINALS)
            .map(|(c, (n, p))| match family {
                SetFamily::Parametric => AmbiguitySet::binomial(c, TOY_SHIFT, toy_scale(), binomial_theta(n, p)),
                _ => default_set(family, c, DEFAULT_L2_GAMMA),
            })
            .collect()
    }

    fn default_set(family: SetFamily, nominal: Pmf, l2_gamma: f64) -> Result<AmbiguitySet> {
        match family {
            SetFamily::L2 => AmbiguitySet::l2(nominal, l2_gamma),
            SetFamily::Wasserstein1 => {
                let gamma = default_wasserstein_gamma(nominal.grid());
                AmbiguitySet::wasserstein1(nominal, gamma)
            }
            SetFamily::Moment => {
                let (g1, lb, ub) = DEFAULT_MOMENT_GAMMAS;
                AmbiguitySet::moment(nominal, g1, lb, ub)
            }
            SetFamily::Parametric => unreachable!("parametric sets are preset-specific"),
        }
    }

    pub fn toy(family: SetFamily) -> Result<Problem> {
        let grid = toy_grid();
        let sets = toy_sets(family, &grid)?;
        let nominals: Vec<Pmf> = sets.iter().map(|s| s.nominal().clone()).collect();
        let reference = reference_from_nominals(&nominals)?;
        let strat = Stratification::equal_contiguous(grid.len(), TOY_STRATA)?;
        let simulator = SimulatorSpec::toy(TOY_THRESHOLD, &grid)?;
        let means = simulator.exact_means(&grid)?;
        Problem::new(strat, TOY_BUDGET, reference, sets, simulator, means)
    }

    pub const WIND_THRESHOLD: f64 = 3.15;
    pub const WIND_BUDGET: u64 = 1000;
    pub const WIND_STRATA: usize = 22;
    pub const WIND_L2_GAMMA: f64 = 0.02;
    /// Nominal mean wind speeds and Rayleigh shifts; the scale is chosen so the
    /// unshifted Rayleigh has the given mean.
    pub const WIND_NOMINALS: [(f64, f64); 2] = [(9.0, 1.5), (11.0, -0.5)];

    /// Bin centres 3.0, 3.1, ..., 24.9 m/s.
    pub fn wind_grid() -> Arc<Grid> {
        Grid::regular(3.0, 0.1, 220).expect("wind grid")
    }

    pub fn rayleigh_scale(mean: f64) -> f64 {
        mean * (2.0 / std::f64::consts::PI).sqrt()
    }

    /// Synthetic exceedance probability: a sigmoid in wind speed centred at
    /// 20 m/s, below 0.005 under 12 m/s.
    pub fn synthetic_wind_mean(x: f64) -> f64 {
        1.0 / (1.0 + (-(x - 20.0) / 1.5).exp())
    }

    /// Scale factors {0.9, 0.95, 1, 1.05, 1.1} crossed with shift offsets
    /// {-0.5, -0.25, 0, 0.25, 0.5}.
    pub fn rayleigh_theta(sigma: f64, delta: f64) -> Vec<(f64, f64)> {
        let mut theta = Vec::with_capacity(25);
        for f in [0.9, 0.95, 1.0, 1.05, 1.1] {
            for dd in [-0.5, -0.25, 0.0, 0.25, 0.5] {
                theta.push((sigma * f, delta + dd));
            }
        }
        theta
    }

    pub fn wind_sets(family: SetFamily, grid: &Arc<Grid>) -> Result<Vec<AmbiguitySet>> {
        WIND_NOMINALS
            .iter()
            .map(|&(mean, delta)| {
                let sigma = rayleigh_scale(mean);
                let c = discretized_rayleigh_pmf(grid.clone(), sigma, delta)?;
                match family {
                    SetFamily::Parametric => AmbiguitySet::rayleigh_shift(c, rayleigh_theta(sigma, delta)),
                    _ => default_set(family, c, WIND_L2_GAMMA),
                }
            })
            .collect()
    }

    pub fn windcase_synthetic(family: SetFamily) -> Result<Problem> {
        let grid = wind_grid();
        let sets = wind_sets(family, &grid)?;
        let nominals: Vec<Pmf> = sets.iter().map(|s| s.nominal().clone()).collect();
        let reference = reference_from_nominals(&nominals)?;
        let strat = Stratification::equal_contiguous(grid.len(), WIND_STRATA)?;
        let means = ConditionalMeanTable::new(grid.points().iter().map(|&x| synthetic_wind_mean(x)).collect())?;
        let simulator = SimulatorSpec::TableBernoulli { means: means.clone() };
        Problem::new(strat, WIND_BUDGET, reference, sets, simulator, means)
    }

    /// Preset by name: `"toy"` or `"windcase-synthetic"`.
    pub fn by_name(name: &str, family: SetFamily) -> Result<Problem> {
        match name {
            "toy" => toy(family),
            "windcase-synthetic" => windcase_synthetic(family),
            other => Err(Error::InvalidArgument(format!("unknown preset {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::presets::*;
    use super::*;
    use crate::estimators::true_mean;

    #[test]
    fn toy_tail_probabilities() {
        let p = toy(SetFamily::L2).unwrap();
        let got: Vec<f64> = p.nominals().iter().map(|c| true_mean(c, &p.means).unwrap()).collect();
        assert!((got[0] - 0.0428).abs() < 5e-4, "{got:?}");
        assert!((got[1] - 0.0564).abs() < 5e-4, "{got:?}");
    }

    #[test]
    fn presets_build_for_every_family() {
        for family in SetFamily::ALL {
            let t = toy(family).unwrap();
            assert_eq!((t.grid.len(), t.num_strata(), t.budget), (35, 7, 100));
            let w = windcase_synthetic(family).unwrap();
            assert_eq!((w.grid.len(), w.num_strata(), w.budget), (220, 22, 1000));
            assert!(w.reference.mass().iter().all(|&r| r > 0.0));
        }
    }

    #[test]
    fn synthetic_wind_means_are_small_at_low_speed() {
        assert!(synthetic_wind_mean(12.0) < 0.005);
        assert!((synthetic_wind_mean(20.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn family_names_round_trip() {
        for f in SetFamily::ALL {
            assert_eq!(f.name().parse::<SetFamily>().unwrap(), f);
        }
        assert!("box".parse::<SetFamily>().is_err());
    }
}
