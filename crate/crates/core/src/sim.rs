//! Simulators with indicator outputs, pilot estimation of conditional means,
//! and seeded Monte Carlo replication of the DR-strat estimator.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dist::{conditional_pmf, stratum_masses, ConditionalPmf, Grid, Pmf, Stratification};
use crate::error::{Error, Result};
use crate::estimators::{ConditionalMeanTable, Sample, SampleBatch};
use crate::rng::{substream, Stream};

/// Mean of the toy output `Y(x)`.
pub fn toy_mu(x: f64) -> f64 {
    0.95 * x * x * (1.0 + 0.5 * (10.0 * x).cos() + 0.5 * (20.0 * x).cos())
}

/// Standard deviation of the toy output `Y(x)`.
pub fn toy_sigma(x: f64) -> f64 {
    1.0 + 0.7 * x.abs() + 0.4 * x.cos() + 0.3 * (14.0 * x).cos()
}

/// `P(Y(x) > l)` for the toy output `Y(x) ~ N(mu(x), sigma(x))`.
pub fn toy_conditional_mean(x: f64, threshold: f64) -> f64 {
    let std = Normal::standard();
    std.sf((threshold - toy_mu(x)) / toy_sigma(x))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind")]
pub enum SimulatorSpec {
    /// Gaussian output thresholded at `threshold`.
    ToyNormal { threshold: f64 },
    /// Bernoulli outputs with tabulated success probabilities.
    TableBernoulli { means: ConditionalMeanTable },
}

impl SimulatorSpec {
    /// Toy simulator, checking the output spread is positive across `grid`.
    pub fn toy(threshold: f64, grid: &Grid) -> Result<Self> {
        if !threshold.is_finite() {
            return Err(Error::InvalidArgument("threshold must be finite".into()));
        }
        if let Some(x) = grid.points().iter().find(|&&x| !(toy_sigma(x) > 0.0)) {
            return Err(Error::InvalidArgument(format!("toy output spread is not positive at x = {x}")));
        }
        Ok(Self::ToyNormal { threshold })
    }

    /// Exact `E[g(x_i)]` over the grid.
    pub fn exact_means(&self, grid: &Grid) -> Result<ConditionalMeanTable> {
        match self {
            Self::ToyNormal { threshold } => {
                ConditionalMeanTable::new(grid.points().iter().map(|&x| toy_conditional_mean(x, *threshold)).collect())
            }
            Self::TableBernoulli { means } => {
                if means.len() != grid.len() {
                    return Err(Error::GridMismatch);
                }
                Ok(means.clone())
            }
        }
    }
}

/// One simulator run at grid point `index`.
pub fn simulate_output<R: Rng + ?Sized>(spec: &SimulatorSpec, grid: &Grid, index: usize, rng: &mut R) -> bool {
    match spec {
        SimulatorSpec::ToyNormal { threshold } => {
            let x = grid.points()[index];
            let z: f64 = rng.sample(StandardNormal);
            toy_mu(x) + toy_sigma(x) * z > *threshold
        }
        SimulatorSpec::TableBernoulli { means } => {
            let p = means.means()[index];
            // Compare against [0, 1) so p = 0 never fires and p = 1 always does.
            rng.random::<f64>() < p
        }
    }
}

/// Raw per-point success frequencies from `per_point` runs at every grid point.
pub fn pilot_estimate_cond_means(
    spec: &SimulatorSpec,
    grid: &Grid,
    per_point: usize,
    seed: u64,
) -> Result<ConditionalMeanTable> {
    if per_point == 0 {
        return Err(Error::InvalidArgument("pilot size must be at least 1".into()));
    }
    let means = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, &[0x9170, i as u64]);
            let hits = (0..per_point).filter(|_| simulate_output(spec, grid, i, &mut rng)).count();
            hits as f64 / per_point as f64
        })
        .collect();
    ConditionalMeanTable::new(means)
}

/// Draws `counts[k]` inputs from each conditional reference stratum and runs
/// the simulator once per input.
pub fn draw_batch<R: Rng + ?Sized>(
    spec: &SimulatorSpec,
    ref_pmf: &Pmf,
    strat: &Stratification,
    counts: &[u64],
    rng: &mut R,
) -> Result<SampleBatch> {
    let conditionals = conditionals(ref_pmf, strat, counts)?;
    let grid = ref_pmf.grid();
    let strata = conditionals
        .iter()
        .zip(counts)
        .map(|(cond, &n)| {
            (0..n)
                .map(|_| {
                    let index = cond.indices[cond.inverse_cdf(rng.random())];
                    Sample { index, output: simulate_output(spec, grid, index, rng) }
                })
                .collect()
        })
        .collect();
    Ok(SampleBatch { strata })
}

fn conditionals(ref_pmf: &Pmf, strat: &Stratification, counts: &[u64]) -> Result<Vec<ConditionalPmf>> {
    if counts.len() != strat.num_strata() {
        return Err(Error::InvalidArgument(format!(
            "allocation has {} entries for {} strata",
            counts.len(),
            strat.num_strata()
        )));
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::ZeroBudgetStratum { stratum: k, budget: 0.0 });
    }
    (0..strat.num_strata()).map(|k| conditional_pmf(ref_pmf, strat, k)).collect()
}

/// Empirical behaviour of the estimator for one eval pmf.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorStats {
    pub mean: f64,
    pub variance: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationResult {
    pub replications: usize,
    pub per_model: Vec<EstimatorStats>,
    /// Total simulator runs; one batch per replication serves every eval pmf.
    pub simulator_calls: u64,
}

/// Running mean and centred sum of squares, mergeable across chunks.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    count: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.count += 1.0;
        let delta = x - self.mean;
        self.mean += delta / self.count;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(&mut self, other: &Moments) {
        if other.count == 0.0 {
            return;
        }
        let total = self.count + other.count;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count / total;
        self.m2 += other.m2 + delta * delta * self.count * other.count / total;
        self.count = total;
    }
}

const CHUNK: usize = 512;

/// Runs `replications` independent sampling rounds at integer allocation
/// `counts` and records the DR-strat estimate for every eval pmf.
///
/// Replications are split into fixed chunks with their own substreams and
/// merged in chunk order, so results do not depend on the thread count.
pub fn replicate_experiment(
    spec: &SimulatorSpec,
    ref_pmf: &Pmf,
    strat: &Stratification,
    counts: &[u64],
    eval_pmfs: &[Pmf],
    replications: usize,
    seed: u64,
) -> Result<ReplicationResult> {
    if replications < 2 {
        return Err(Error::InvalidArgument("at least 2 replications are required".into()));
    }
    if eval_pmfs.is_empty() {
        return Err(Error::InvalidArgument("no eval pmfs given".into()));
    }
    let conditionals = conditionals(ref_pmf, strat, counts)?;
    let reference = ref_pmf.mass();
    let omega_ref = stratum_masses(reference, strat);
    // Per-point weight of a success for each eval pmf: likelihood ratio times
    // the stratum factor omega_ref_k / n_k.
    let mut weights = Vec::with_capacity(eval_pmfs.len());
    for p in eval_pmfs {
        p.ensure_same_grid(ref_pmf)?;
        let mut w = vec![0.0; reference.len()];
        for (i, (&pi, &ri)) in p.mass().iter().zip(reference).enumerate() {
            if pi > 0.0 && ri <= 0.0 {
                return Err(Error::SupportViolation { index: i, mass: pi });
            }
            if pi > 0.0 {
                let k = strat.stratum_of(i);
                w[i] = pi / ri * omega_ref[k] / counts[k] as f64;
            }
        }
        weights.push(w);
    }
    let grid = ref_pmf.grid();
    let chunks = replications.div_ceil(CHUNK);
    let partials: Vec<Vec<Moments>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng: Stream = substream(seed, &[0x4e9, c as u64]);
            let reps = CHUNK.min(replications - c * CHUNK);
            let mut acc = vec![Moments::default(); weights.len()];
            let mut estimates = vec![0.0; weights.len()];
            for _ in 0..reps {
                estimates.iter_mut().for_each(|e| *e = 0.0);
                for (cond, &n) in conditionals.iter().zip(counts) {
                    for _ in 0..n {
                        let index = cond.indices[cond.inverse_cdf(rng.random())];
                        if simulate_output(spec, grid, index, &mut rng) {
                            for (e, w) in estimates.iter_mut().zip(&weights) {
                                *e += w[index];
                            }
                        }
                    }
                }
                for (a, e) in acc.iter_mut().zip(&estimates) {
                    a.push(*e);
                }
            }
            acc
        })
        .collect();
    let mut total = vec![Moments::default(); weights.len()];
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            t.merge(p);
        }
    }
    let r = replications as f64;
    let per_model = total
        .iter()
        .map(|m| {
            let variance = m.m2 / (r - 1.0);
            EstimatorStats { mean: m.mean, variance, std_error: (variance / r).sqrt() }
        })
        .collect();
    let budget: u64 = counts.iter().sum();
    Ok(ReplicationResult { replications, per_model, simulator_calls: budget * replications as u64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn toy_mean_at_origin() {
        // mu(0) = 0, sigma(0) = 1.7
        let oracle = 0.5 * libm_erfc(5.2 / 1.7 / std::f64::consts::SQRT_2);
        assert_abs_diff_eq!(toy_conditional_mean(0.0, 5.2), oracle, epsilon = 1e-12);
        assert!((toy_conditional_mean(0.0, 5.2) - 1.11e-3).abs() < 1e-5);
    }

    // Complementary error function by its continued fraction (x > 0), as an
    // independent check on the normal tail.
    fn libm_erfc(x: f64) -> f64 {
        let mut f = 0.0;
        for k in (1..200).rev() {
            f = (k as f64 / 2.0) / (x + f);
        }
        (-x * x).exp() / std::f64::consts::PI.sqrt() / (x + f)
    }

    #[test]
    fn median_threshold_gives_half() {
        let x: f64 = 1.3;
        assert_abs_diff_eq!(toy_conditional_mean(x, toy_mu(x)), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn deterministic_table_outputs() {
        let grid = Grid::new(vec![0.0, 1.0]).unwrap();
        let spec = SimulatorSpec::TableBernoulli { means: ConditionalMeanTable::new(vec![0.0, 1.0]).unwrap() };
        let mut rng = substream(3, &[]);
        for _ in 0..1000 {
            assert!(!simulate_output(&spec, &grid, 0, &mut rng));
            assert!(simulate_output(&spec, &grid, 1, &mut rng));
        }
        let pilot = pilot_estimate_cond_means(&spec, &grid, 3, 1).unwrap();
        assert_eq!(pilot.means(), &[0.0, 1.0]);
    }

    #[test]
    fn welford_merge_matches_direct() {
        let xs: Vec<f64> = (0..100).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
        let mut whole = Moments::default();
        xs.iter().for_each(|&x| whole.push(x));
        let mut a = Moments::default();
        let mut b = Moments::default();
        xs[..37].iter().for_each(|&x| a.push(x));
        xs[37..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert_abs_diff_eq!(a.mean, whole.mean, epsilon = 1e-12);
        assert_abs_diff_eq!(a.m2, whole.m2, epsilon = 1e-9);
    }

    #[test]
    fn zero_region_estimator_is_identically_zero() {
        let grid = Grid::new(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let reference = Pmf::uniform(grid.clone());
        let strat = Stratification::equal_contiguous(4, 2).unwrap();
        let spec =
            SimulatorSpec::TableBernoulli { means: ConditionalMeanTable::new(vec![0.0, 0.0, 1.0, 1.0]).unwrap() };
        let eval = Pmf::new(grid, vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let r = replicate_experiment(&spec, &reference, &strat, &[3, 4], &[eval], 100, 9).unwrap();
        assert_eq!(r.per_model[0].mean, 0.0);
        assert_eq!(r.per_model[0].variance, 0.0);
        assert_eq!(r.simulator_calls, 700);
    }

    #[test]
    fn one_replication_rejected() {
        let grid = Grid::new(vec![0.0, 1.0]).unwrap();
        let reference = Pmf::uniform(grid);
        let strat = Stratification::equal_contiguous(2, 1).unwrap();
        let spec = SimulatorSpec::TableBernoulli { means: ConditionalMeanTable::new(vec![0.2, 0.4]).unwrap() };
        assert!(replicate_experiment(&spec, &reference, &strat, &[2], std::slice::from_ref(&reference), 1, 0).is_err());
    }
}
