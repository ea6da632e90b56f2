//! Ambiguity sets of plausible pmfs around a nominal input model.
//!
//! Four families: an L2 ball, a 1-Wasserstein ball (one-dimensional grids, so
//! the cumulative formula applies), a finite slice of a parametric family
//! (scaled binomial or shifted Rayleigh), and a moment-constrained set.

pub mod projection;
pub mod transport;

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::dist::{discretized_rayleigh_pmf, scaled_binomial_pmf, Grid, Pmf};
use crate::error::{Error, Result};
use crate::rng::substream;
use projection::{
    l2_norm_diff, maximize_linear_wasserstein1, project_l2_ball_simplex, project_wasserstein1_simplex,
    wasserstein1_cdf, MomentProjector, MomentRegion,
};

/// Nominal mean and variance anchoring a moment set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentSummary {
    pub mean: f64,
    pub variance: f64,
}

impl MomentSummary {
    pub fn of(p: &Pmf) -> Self {
        Self { mean: p.mean(), variance: p.variance() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AmbiguitySet {
    L2 {
        nominal: Pmf,
        gamma: f64,
    },
    Wass1 {
        nominal: Pmf,
        gamma: f64,
    },
    /// Scaled binomials `X = (B - shift) / scale`, `B ~ Bin(n, p)` for `(n, p)` in `theta`.
    ParamBinomial {
        nominal: Pmf,
        shift: f64,
        scale: f64,
        theta: Vec<(u64, f64)>,
        members: Vec<Pmf>,
    },
    /// Shifted Rayleigh discretizations for `(sigma, delta)` in `theta`.
    ParamRayleighShift {
        nominal: Pmf,
        theta: Vec<(f64, f64)>,
        members: Vec<Pmf>,
    },
    Moment {
        nominal: Pmf,
        summary: MomentSummary,
        gamma1: f64,
        gamma2_lb: f64,
        gamma2_ub: f64,
    },
}

pub const DEFAULT_L2_GAMMA: f64 = 0.05;
pub const DEFAULT_MOMENT_GAMMAS: (f64, f64, f64) = (0.01, 0.9, 1.1);

/// `0.1 * span / |grid|`.
pub fn default_wasserstein_gamma(grid: &Grid) -> f64 {
    0.1 * grid.span() / grid.len() as f64
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_finite() && gamma >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidAmbiguitySet(format!("size parameter {gamma} must be finite and >= 0")))
    }
}

impl AmbiguitySet {
    pub fn l2(nominal: Pmf, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        Ok(Self::L2 { nominal, gamma })
    }

    pub fn wasserstein1(nominal: Pmf, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        Ok(Self::Wass1 { nominal, gamma })
    }

    pub fn binomial(nominal: Pmf, shift: f64, scale: f64, theta: Vec<(u64, f64)>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::InvalidAmbiguitySet("empty parameter grid".into()));
        }
        let members = theta
            .iter()
            .map(|&(n, p)| scaled_binomial_pmf(nominal.grid().clone(), n, p, shift, scale))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::ParamBinomial { nominal, shift, scale, theta, members })
    }

    pub fn rayleigh_shift(nominal: Pmf, theta: Vec<(f64, f64)>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::InvalidAmbiguitySet("empty parameter grid".into()));
        }
        let members = theta
            .iter()
            .map(|&(sigma, delta)| discretized_rayleigh_pmf(nominal.grid().clone(), sigma, delta))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::ParamRayleighShift { nominal, theta, members })
    }

    /// Moment set centred on the nominal's own mean and variance.
    pub fn moment(nominal: Pmf, gamma1: f64, gamma2_lb: f64, gamma2_ub: f64) -> Result<Self> {
        let summary = MomentSummary::of(&nominal);
        Self::moment_with_summary(nominal, summary, gamma1, gamma2_lb, gamma2_ub)
    }

    pub fn moment_with_summary(
        nominal: Pmf,
        summary: MomentSummary,
        gamma1: f64,
        gamma2_lb: f64,
        gamma2_ub: f64,
    ) -> Result<Self> {
        check_gamma(gamma1)?;
        if !(summary.variance > 0.0) {
            return Err(Error::InvalidAmbiguitySet("nominal variance must be positive".into()));
        }
        if !(gamma2_lb > 0.0 && gamma2_ub >= gamma2_lb && gamma2_ub.is_finite()) {
            return Err(Error::InvalidAmbiguitySet(format!(
                "need 0 < gamma2_lb <= gamma2_ub, got ({gamma2_lb}, {gamma2_ub})"
            )));
        }
        if nominal.len() < 3 {
            return Err(Error::InvalidAmbiguitySet("moment sets need at least 3 grid points".into()));
        }
        Ok(Self::Moment { nominal, summary, gamma1, gamma2_lb, gamma2_ub })
    }

    pub fn family(&self) -> &'static str {
        match self {
            Self::L2 { .. } => "l2",
            Self::Wass1 { .. } => "wasserstein1",
            Self::ParamBinomial { .. } => "binomial",
            Self::ParamRayleighShift { .. } => "rayleigh_shift",
            Self::Moment { .. } => "moment",
        }
    }

    pub fn nominal(&self) -> &Pmf {
        match self {
            Self::L2 { nominal, .. }
            | Self::Wass1 { nominal, .. }
            | Self::ParamBinomial { nominal, .. }
            | Self::ParamRayleighShift { nominal, .. }
            | Self::Moment { nominal, .. } => nominal,
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.nominal().grid()
    }

    /// Generated members of a parametric set; `None` for the other families.
    pub fn parametric_members(&self) -> Option<&[Pmf]> {
        match self {
            Self::ParamBinomial { members, .. } | Self::ParamRayleighShift { members, .. } => Some(members),
            _ => None,
        }
    }

    /// True when the set is exactly `{nominal}` (zero-radius discrepancy ball).
    pub fn is_singleton(&self) -> bool {
        match self {
            Self::L2 { gamma, .. } | Self::Wass1 { gamma, .. } => *gamma == 0.0,
            Self::ParamBinomial { members, .. } | Self::ParamRayleighShift { members, .. } => members.len() == 1,
            Self::Moment { .. } => false,
        }
    }

    fn moment_region(&self) -> Option<MomentRegion> {
        match self {
            Self::Moment { summary, gamma1, gamma2_lb, gamma2_ub, .. } => Some(MomentRegion {
                mu: summary.mean,
                var: summary.variance,
                gamma1: *gamma1,
                lb: *gamma2_lb,
                ub: *gamma2_ub,
            }),
            _ => None,
        }
    }

    /// Membership with every defining constraint allowed to slip by `tol`.
    pub fn contains(&self, p: &Pmf, tol: f64) -> Result<bool> {
        self.nominal().ensure_same_grid(p)?;
        Ok(self.contains_mass(p.mass(), tol))
    }

    pub(crate) fn contains_mass(&self, p: &[f64], tol: f64) -> bool {
        match self {
            Self::L2 { nominal, gamma } => l2_norm_diff(p, nominal.mass()) <= gamma + tol,
            Self::Wass1 { nominal, gamma } => {
                wasserstein1_cdf(p, nominal.mass(), &nominal.grid().spacings()) <= gamma + tol
            }
            Self::ParamBinomial { members, .. } | Self::ParamRayleighShift { members, .. } => {
                members.iter().any(|m| m.mass().iter().zip(p).all(|(a, b)| (a - b).abs() <= tol))
            }
            Self::Moment { nominal, .. } => {
                let region = self.moment_region().expect("moment set");
                let (d, s) = region.coordinates(p, nominal.grid().points());
                region.violation(d, s) <= tol
            }
        }
    }

    /// A member of the set close to `p` (exact Euclidean projection for L2).
    pub fn project(&self, p: &Pmf) -> Result<Pmf> {
        self.nominal().ensure_same_grid(p)?;
        let mass = self.project_mass(p.mass())?;
        Pmf::new(self.grid().clone(), mass)
    }

    /// Projection of an arbitrary vector (not necessarily on the simplex).
    pub(crate) fn project_mass(&self, y: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::L2 { nominal, gamma } => Ok(project_l2_ball_simplex(y, nominal.mass(), *gamma)),
            Self::Wass1 { nominal, gamma } => {
                project_wasserstein1_simplex(y, nominal.mass(), &nominal.grid().spacings(), *gamma)
            }
            Self::Moment { nominal, .. } => {
                let region = self.moment_region().expect("moment set");
                MomentProjector::new(&region, nominal.grid().points())?.project(y, nominal.mass())
            }
            Self::ParamBinomial { .. } | Self::ParamRayleighShift { .. } => {
                Err(Error::UnsupportedProjection(self.family()))
            }
        }
    }

    /// Reusable projector for repeated calls inside an ascent loop.
    pub(crate) fn projector(&self) -> Result<Projector<'_>> {
        Projector::new(self)
    }

    /// Random member: a uniform parameter draw for parametric sets, otherwise
    /// the nominal plus a random zero-sum perturbation, projected back.
    pub fn sample_member(&self, seed: u64) -> Pmf {
        let mut rng = substream(seed, &[0x5eed]);
        self.sample_member_with(&mut rng)
    }

    pub(crate) fn sample_member_with<R: Rng>(&self, rng: &mut R) -> Pmf {
        if let Some(members) = self.parametric_members() {
            return members[rng.random_range(0..members.len())].clone();
        }
        if self.is_singleton() {
            return self.nominal().clone();
        }
        let nominal = self.nominal();
        let c = nominal.mass();
        let n = c.len();
        let mut delta: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mean = delta.iter().sum::<f64>() / n as f64;
        delta.iter_mut().for_each(|v| *v -= mean);
        let factor: f64 = rng.random_range(0.5..2.0);
        let size = match self {
            Self::L2 { gamma, .. } => gamma / l2_norm_diff(&delta, &vec![0.0; n]),
            Self::Wass1 { gamma, .. } => {
                let zero = vec![0.0; n];
                gamma / wasserstein1_cdf(&delta, &zero, &nominal.grid().spacings())
            }
            _ => {
                let peak = c.iter().cloned().fold(0.0, f64::max);
                peak / delta.iter().map(|v| v.abs()).fold(0.0, f64::max)
            }
        };
        let y: Vec<f64> = c.iter().zip(&delta).map(|(a, d)| a + factor * size * d).collect();
        match self.project_mass(&y).and_then(|m| Pmf::new(nominal.grid().clone(), m)) {
            Ok(p) if self.contains_mass(p.mass(), 1e-8) => p,
            _ => nominal.clone(),
        }
    }
}

/// Projection with per-set precomputation (spacings, moment metric).
pub(crate) struct Projector<'a> {
    set: &'a AmbiguitySet,
    spacings: Vec<f64>,
    region: Option<MomentRegion>,
}

impl<'a> Projector<'a> {
    fn new(set: &'a AmbiguitySet) -> Result<Self> {
        if set.parametric_members().is_some() {
            return Err(Error::UnsupportedProjection(set.family()));
        }
        Ok(Self { set, spacings: set.grid().spacings(), region: set.moment_region() })
    }

    pub fn project(&self, y: &[f64]) -> Result<Vec<f64>> {
        match self.set {
            AmbiguitySet::L2 { nominal, gamma } => Ok(project_l2_ball_simplex(y, nominal.mass(), *gamma)),
            AmbiguitySet::Wass1 { nominal, gamma } => {
                project_wasserstein1_simplex(y, nominal.mass(), &self.spacings, *gamma)
            }
            AmbiguitySet::Moment { nominal, .. } => {
                let region = self.region.as_ref().expect("moment set");
                MomentProjector::new(region, nominal.grid().points())?.project(y, nominal.mass())
            }
            _ => Err(Error::UnsupportedProjection(self.set.family())),
        }
    }
}

impl Projector<'_> {
    /// Exact maximizer of `g . q` over the set, where one is available cheaply.
    pub fn linear_maximizer(&self, g: &[f64]) -> Option<Vec<f64>> {
        match self.set {
            AmbiguitySet::Wass1 { nominal, gamma } => {
                let q = maximize_linear_wasserstein1(g, nominal.mass(), nominal.grid().points(), *gamma);
                let dist = wasserstein1_cdf(&q, nominal.mass(), &self.spacings);
                if dist <= *gamma {
                    return Some(q);
                }
                // Round-off in the mixed plan: pull back toward the center.
                let shrink = gamma / dist;
                Some(nominal.mass().iter().zip(&q).map(|(c, v)| c + shrink * (v - c)).collect())
            }
            _ => None,
        }
    }
}

/// `||p - q||_2`.
pub fn l2_distance(p: &Pmf, q: &Pmf) -> Result<f64> {
    p.ensure_same_grid(q)?;
    Ok(l2_norm_diff(p.mass(), q.mass()))
}

/// 1-Wasserstein distance on a one-dimensional grid via cumulative masses.
pub fn wasserstein1_distance_1d(p: &Pmf, q: &Pmf) -> Result<f64> {
    p.ensure_same_grid(q)?;
    Ok(wasserstein1_cdf(p.mass(), q.mass(), &p.grid().spacings()))
}

/// Largest grid handled by the transport-plan membership check.
pub const TRANSPORT_MAX_GRID: usize = 6;

/// Membership in the general p-Wasserstein ball, solved as a transport problem.
pub fn contains_wasserstein_transport(nominal: &Pmf, gamma: f64, power: f64, p: &Pmf, tol: f64) -> Result<bool> {
    nominal.ensure_same_grid(p)?;
    if p.len() > TRANSPORT_MAX_GRID {
        return Err(Error::GridTooLarge { size: p.len(), max: TRANSPORT_MAX_GRID });
    }
    let cost = transport::wasserstein_cost(p.mass(), nominal.mass(), p.grid().points(), power);
    Ok(cost <= gamma.powf(power) + tol)
}
