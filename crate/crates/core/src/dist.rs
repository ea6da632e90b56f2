//! Discrete input models: support grids, probability mass functions,
//! stratifications of grid indices, and the parametric constructors used by
//! the experiment presets.

use std::sync::Arc;

use serde::{Serialize, Serializer};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};

/// Mass sums further than this from one are rejected rather than renormalized.
pub const PMF_REJECT_TOL: f64 = 1e-6;
/// Target accuracy of the normalization of every constructed pmf.
pub const PMF_SUM_TOL: f64 = 1e-10;

/// Strictly increasing finite support of a one-dimensional input.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Grid {
    points: Vec<f64>,
}

impl Grid {
    pub fn new(points: Vec<f64>) -> Result<Arc<Self>> {
        if points.len() < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 points, got {}", points.len())));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidGrid("non-finite grid point".into()));
        }
        if let Some(w) = points.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid(format!("points must be strictly increasing (index {} -> {})", w, w + 1)));
        }
        Ok(Arc::new(Self { points }))
    }

    /// `count` points `start, start + step, ...`.
    pub fn regular(start: f64, step: f64, count: usize) -> Result<Arc<Self>> {
        Self::new((0..count).map(|i| start + step * i as f64).collect())
    }

    /// Points `(i - shift) / scale` for integer `i` in `first..=last`.
    pub fn affine_integers(first: i64, last: i64, shift: f64, scale: f64) -> Result<Arc<Self>> {
        if !(scale > 0.0) {
            return Err(Error::InvalidGrid(format!("scale must be positive, got {scale}")));
        }
        Self::new((first..=last).map(|i| (i as f64 - shift) / scale).collect())
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn span(&self) -> f64 {
        self.points[self.points.len() - 1] - self.points[0]
    }

    /// Gaps `x_{i+1} - x_i`.
    pub fn spacings(&self) -> Vec<f64> {
        self.points.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

pub(crate) fn same_grid(a: &Arc<Grid>, b: &Arc<Grid>) -> bool {
    Arc::ptr_eq(a, b) || a.points == b.points
}

/// Probability mass function over a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Pmf {
    grid: Arc<Grid>,
    mass: Vec<f64>,
}

impl Serialize for Pmf {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.mass.serialize(s)
    }
}

impl Pmf {
    /// Validates a mass vector that should already sum to one.
    ///
    /// Float noise up to [`PMF_REJECT_TOL`] is renormalized away; larger
    /// deficits and negative entries are errors.
    pub fn new(grid: Arc<Grid>, mass: Vec<f64>) -> Result<Self> {
        if mass.len() != grid.len() {
            return Err(Error::InvalidPmf(format!("{} masses for a {}-point grid", mass.len(), grid.len())));
        }
        let mut mass = mass;
        for (i, m) in mass.iter_mut().enumerate() {
            if !m.is_finite() {
                return Err(Error::InvalidPmf(format!("non-finite mass at index {i}")));
            }
            if *m < 0.0 {
                if *m < -PMF_SUM_TOL {
                    return Err(Error::InvalidPmf(format!("negative mass {m} at index {i}")));
                }
                *m = 0.0;
            }
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > PMF_REJECT_TOL {
            return Err(Error::InvalidPmf(format!("masses sum to {total}, not 1")));
        }
        mass.iter_mut().for_each(|m| *m /= total);
        Ok(Self { grid, mass })
    }

    /// Normalizes arbitrary nonnegative weights into a pmf.
    pub fn from_weights(grid: Arc<Grid>, weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidPmf("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidPmf("weights sum to zero".into()));
        }
        Self::new(grid, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(grid: Arc<Grid>) -> Self {
        let n = grid.len();
        Self { grid, mass: vec![1.0 / n as f64; n] }
    }

    pub fn point_mass(grid: Arc<Grid>, index: usize) -> Result<Self> {
        if index >= grid.len() {
            return Err(Error::InvalidArgument(format!("index {index} outside grid")));
        }
        let mut mass = vec![0.0; grid.len()];
        mass[index] = 1.0;
        Ok(Self { grid, mass })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    pub fn into_mass(self) -> Vec<f64> {
        self.mass
    }

    pub fn mean(&self) -> f64 {
        self.mass.iter().zip(self.grid.points()).map(|(p, x)| p * x).sum()
    }

    /// Second moment about `center` (not necessarily the pmf's own mean).
    pub fn second_moment_about(&self, center: f64) -> f64 {
        self.mass.iter().zip(self.grid.points()).map(|(p, x)| p * (x - center).powi(2)).sum()
    }

    pub fn variance(&self) -> f64 {
        self.second_moment_about(self.mean())
    }

    /// Cumulative masses `P(X <= x_i)`.
    pub fn cdf(&self) -> Vec<f64> {
        self.mass
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect()
    }

    pub fn ensure_same_grid(&self, other: &Pmf) -> Result<()> {
        if same_grid(&self.grid, &other.grid) {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }
}

/// Partition of grid indices into `K` nonempty strata.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stratification {
    index_sets: Vec<Vec<usize>>,
    #[serde(skip)]
    stratum_of: Vec<usize>,
}

impl Stratification {
    /// Builds from explicit index lists over a grid of `grid_len` points.
    /// Index lists are sorted; they need not be contiguous.
    pub fn new(index_sets: Vec<Vec<usize>>, grid_len: usize) -> Result<Self> {
        if index_sets.is_empty() {
            return Err(Error::InvalidStratification("no strata".into()));
        }
        let mut stratum_of = vec![usize::MAX; grid_len];
        let mut index_sets = index_sets;
        for (k, set) in index_sets.iter_mut().enumerate() {
            if set.is_empty() {
                return Err(Error::InvalidStratification(format!("stratum {k} is empty")));
            }
            set.sort_unstable();
            for &i in set.iter() {
                if i >= grid_len {
                    return Err(Error::InvalidStratification(format!(
                        "index {i} in stratum {k} is outside the {grid_len}-point grid"
                    )));
                }
                if stratum_of[i] != usize::MAX {
                    return Err(Error::InvalidStratification(format!(
                        "index {i} appears in strata {} and {k}",
                        stratum_of[i]
                    )));
                }
                stratum_of[i] = k;
            }
        }
        if let Some(i) = stratum_of.iter().position(|&k| k == usize::MAX) {
            return Err(Error::InvalidStratification(format!("grid index {i} is not covered by any stratum")));
        }
        Ok(Self { index_sets, stratum_of })
    }

    /// `k` contiguous strata whose sizes differ by at most one
    /// (the first `grid_len % k` strata take the extra point).
    pub fn equal_contiguous(grid_len: usize, k: usize) -> Result<Self> {
        if k == 0 || k > grid_len {
            return Err(Error::InvalidStratification(format!(
                "cannot split {grid_len} points into {k} nonempty strata"
            )));
        }
        let base = grid_len / k;
        let extra = grid_len % k;
        let mut start = 0;
        let sets = (0..k)
            .map(|s| {
                let size = base + usize::from(s < extra);
                let set: Vec<usize> = (start..start + size).collect();
                start += size;
                set
            })
            .collect();
        Self::new(sets, grid_len)
    }

    pub fn num_strata(&self) -> usize {
        self.index_sets.len()
    }

    pub fn grid_len(&self) -> usize {
        self.stratum_of.len()
    }

    pub fn index_set(&self, k: usize) -> &[usize] {
        &self.index_sets[k]
    }

    pub fn index_sets(&self) -> &[Vec<usize>] {
        &self.index_sets
    }

    pub fn stratum_of(&self, index: usize) -> usize {
        self.stratum_of[index]
    }

    pub(crate) fn check_grid(&self, grid: &Grid) -> Result<()> {
        if grid.len() == self.grid_len() {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }
}

/// Stratum probabilities `omega_k = sum_{i in I_k} p_i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct StrataProbabilities {
    pub omega: Vec<f64>,
}

/// Per-stratum masses with no positivity requirement.
pub fn stratum_masses(mass: &[f64], strat: &Stratification) -> Vec<f64> {
    strat.index_sets().iter().map(|set| set.iter().map(|&i| mass[i]).sum()).collect()
}

pub fn strata_probabilities(pmf: &Pmf, strat: &Stratification) -> Result<StrataProbabilities> {
    strat.check_grid(pmf.grid())?;
    let omega = stratum_masses(pmf.mass(), strat);
    if let Some((k, &w)) = omega.iter().enumerate().find(|(_, w)| **w <= 0.0) {
        return Err(Error::StratumZeroProbability { stratum: k, mass: w });
    }
    Ok(StrataProbabilities { omega })
}

/// A pmf restricted to one stratum and renormalized.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionalPmf {
    /// Grid indices of the stratum, ascending.
    pub indices: Vec<usize>,
    pub mass: Vec<f64>,
}

impl ConditionalPmf {
    /// Position in `indices` selected by a uniform draw `u` in `[0, 1)`.
    pub fn inverse_cdf(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (j, m) in self.mass.iter().enumerate() {
            acc += m;
            if u < acc {
                return j;
            }
        }
        // u landed in the rounding gap at the top; take the last positive mass.
        self.mass.iter().rposition(|&m| m > 0.0).unwrap_or(self.mass.len() - 1)
    }
}

pub fn conditional_pmf(pmf: &Pmf, strat: &Stratification, k: usize) -> Result<ConditionalPmf> {
    strat.check_grid(pmf.grid())?;
    if k >= strat.num_strata() {
        return Err(Error::InvalidArgument(format!("stratum {k} out of range")));
    }
    let indices = strat.index_set(k).to_vec();
    let omega: f64 = indices.iter().map(|&i| pmf.mass()[i]).sum();
    if omega <= 0.0 {
        return Err(Error::StratumZeroProbability { stratum: k, mass: omega });
    }
    let mass = indices.iter().map(|&i| pmf.mass()[i] / omega).collect();
    Ok(ConditionalPmf { indices, mass })
}

/// Pointwise average of the nominal pmfs.
pub fn reference_from_nominals(nominals: &[Pmf]) -> Result<Pmf> {
    let first = nominals.first().ok_or_else(|| Error::InvalidArgument("no nominal pmfs".into()))?;
    let mut mass = vec![0.0; first.len()];
    for p in nominals {
        first.ensure_same_grid(p)?;
        mass.iter_mut().zip(p.mass()).for_each(|(a, b)| *a += b);
    }
    let m = nominals.len() as f64;
    mass.iter_mut().for_each(|a| *a /= m);
    Pmf::new(first.grid().clone(), mass)
}

/// Binomial masses of `B = x * scale + shift` at each grid point, renormalized
/// over the grid (mass of `B` outside the grid is dropped).
pub fn scaled_binomial_pmf(grid: Arc<Grid>, n_trials: u64, p_success: f64, shift: f64, scale: f64) -> Result<Pmf> {
    if !(0.0..=1.0).contains(&p_success) {
        return Err(Error::InvalidArgument(format!("success probability {p_success} outside [0, 1]")));
    }
    let mut weights = Vec::with_capacity(grid.len());
    for &x in grid.points() {
        let b = x * scale + shift;
        let rounded = b.round();
        if (b - rounded).abs() > 1e-9 * rounded.abs().max(1.0) {
            return Err(Error::NonIntegerPreimage { value: x });
        }
        weights.push(binomial_mass(n_trials, p_success, rounded));
    }
    Pmf::from_weights(grid, weights)
}

fn binomial_mass(n: u64, p: f64, b: f64) -> f64 {
    if b < 0.0 || b > n as f64 {
        return 0.0;
    }
    let k = b as u64;
    if p == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if p == 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    let ln = ln_binomial(n, k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln();
    ln.exp()
}

/// Masses proportional to the shifted Rayleigh density
/// `(x - delta) / sigma^2 * exp(-((x - delta) / sigma)^2 / 2)` at each grid point.
pub fn discretized_rayleigh_pmf(grid: Arc<Grid>, sigma: f64, delta: f64) -> Result<Pmf> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("Rayleigh scale {sigma} must be positive")));
    }
    let mut weights = Vec::with_capacity(grid.len());
    for &x in grid.points() {
        let arg = x - delta;
        if arg <= 0.0 {
            return Err(Error::NonPositiveDensityArgument { arg });
        }
        let z = arg / sigma;
        weights.push(arg / (sigma * sigma) * (-0.5 * z * z).exp());
    }
    Pmf::from_weights(grid, weights)
}
