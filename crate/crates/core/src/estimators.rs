//! Crude Monte Carlo, classical stratified, and reference-sampled (DR-strat)
//! estimators of `P(Y > l)`, with the analytic variance of the latter.
//!
//! Outputs are indicators, so `E[g(x)^2] = E[g(x)]` and the variance only
//! needs the conditional mean table.

use serde::{Deserialize, Serialize};

use crate::dist::{stratum_masses, Pmf, StrataProbabilities, Stratification};
use crate::error::{Error, Result};

/// Continuous allocations below this per-stratum budget are rejected by the variance.
pub const MIN_STRATUM_BUDGET: f64 = 1e-6;

/// `E[g(x_i)]` for every grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConditionalMeanTable {
    means: Vec<f64>,
}

impl ConditionalMeanTable {
    pub fn new(means: Vec<f64>) -> Result<Self> {
        if let Some((i, m)) = means.iter().enumerate().find(|(_, m)| !(0.0..=1.0).contains(*m)) {
            return Err(Error::InvalidArgument(format!("conditional mean {m} at index {i} is outside [0, 1]")));
        }
        Ok(Self { means })
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// Per-stratum simulation budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationVector {
    budgets: Vec<f64>,
}

impl AllocationVector {
    pub fn continuous(budgets: Vec<f64>) -> Result<Self> {
        if budgets.is_empty() || budgets.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::InvalidArgument("allocation budgets must be finite and nonnegative".into()));
        }
        Ok(Self { budgets })
    }

    pub fn integer(counts: &[u64]) -> Result<Self> {
        if counts.contains(&0) {
            return Err(Error::InvalidArgument("integer allocations need n_k >= 1".into()));
        }
        Self::continuous(counts.iter().map(|&c| c as f64).collect())
    }

    pub fn budgets(&self) -> &[f64] {
        &self.budgets
    }

    pub fn len(&self) -> usize {
        self.budgets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.budgets.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.budgets.iter().sum()
    }

    pub fn is_integer(&self) -> bool {
        self.budgets.iter().all(|b| b.fract() == 0.0 && *b >= 1.0)
    }

    /// Integer counts, or `None` if any budget is fractional or zero.
    pub fn counts(&self) -> Option<Vec<u64>> {
        self.is_integer().then(|| self.budgets.iter().map(|&b| b as u64).collect())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { budgets: self.budgets.iter().map(|b| b * c).collect() }
    }
}

/// One simulated input: grid index and indicator output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub index: usize,
    pub output: bool,
}

/// Samples grouped by stratum.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleBatch {
    pub strata: Vec<Vec<Sample>>,
}

impl SampleBatch {
    pub fn sizes(&self) -> Vec<usize> {
        self.strata.iter().map(Vec::len).collect()
    }

    pub fn stratum_mean(&self, k: usize) -> Result<f64> {
        let s = &self.strata[k];
        if s.is_empty() {
            return Err(Error::EmptyStratum(k));
        }
        Ok(s.iter().filter(|x| x.output).count() as f64 / s.len() as f64)
    }

    /// One CSV-ready row per stratum.
    pub fn summary(&self, omega_ref: &StrataProbabilities) -> Result<Vec<StratumSummary>> {
        (0..self.strata.len())
            .map(|k| {
                Ok(StratumSummary {
                    stratum: k + 1,
                    n: self.strata[k].len(),
                    omega_ref: omega_ref.omega[k],
                    within_mean: self.stratum_mean(k)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumSummary {
    pub stratum: usize,
    pub n: usize,
    pub omega_ref: f64,
    pub within_mean: f64,
}

/// `sum_i p_i E[g(x_i)]`.
pub fn true_mean(pmf: &Pmf, means: &ConditionalMeanTable) -> Result<f64> {
    if pmf.len() != means.len() {
        return Err(Error::GridMismatch);
    }
    Ok(pmf.mass().iter().zip(means.means()).map(|(p, e)| p * e).sum())
}

pub fn crude_mc_estimate(outputs: &[bool]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(outputs.iter().filter(|&&g| g).count() as f64 / outputs.len() as f64)
}

/// `sum_k omega_k * (within-stratum mean of g)`.
pub fn stratified_estimate(batch: &SampleBatch, omega: &StrataProbabilities) -> Result<f64> {
    if batch.strata.len() != omega.omega.len() {
        return Err(Error::InvalidArgument("batch and omega disagree on K".into()));
    }
    (0..batch.strata.len()).map(|k| Ok(omega.omega[k] * batch.stratum_mean(k)?)).sum()
}

/// Conditional output standard deviation per stratum, `sqrt(m_k (1 - m_k))`
/// with `m_k` the pmf-weighted conditional mean of the stratum.
pub fn stratum_output_std(pmf: &Pmf, strat: &Stratification, means: &ConditionalMeanTable) -> Result<Vec<f64>> {
    strat.check_grid(pmf.grid())?;
    (0..strat.num_strata())
        .map(|k| {
            let set = strat.index_set(k);
            let w: f64 = set.iter().map(|&i| pmf.mass()[i]).sum();
            if w <= 0.0 {
                return Err(Error::StratumZeroProbability { stratum: k, mass: w });
            }
            let m: f64 = set.iter().map(|&i| pmf.mass()[i] * means.means()[i]).sum::<f64>() / w;
            Ok((m * (1.0 - m)).max(0.0).sqrt())
        })
        .collect()
}

/// Neyman allocation `n_k = N_T omega_k sigma_k / sum_j omega_j sigma_j`.
pub fn neyman_allocation(omega: &StrataProbabilities, sigma: &[f64], total: f64) -> Result<AllocationVector> {
    if sigma.len() != omega.omega.len() {
        return Err(Error::InvalidArgument("omega and sigma lengths differ".into()));
    }
    let products: Vec<f64> = omega.omega.iter().zip(sigma).map(|(w, s)| w * s).collect();
    let sum: f64 = products.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::AllZeroProducts);
    }
    AllocationVector::continuous(products.iter().map(|p| total * p / sum).collect())
}

/// `sum_k omega_k^2 sigma_k^2 / n_k`.
pub fn classical_stratified_variance(omega: &[f64], sigma: &[f64], n: &[f64]) -> f64 {
    omega.iter().zip(sigma).zip(n).map(|((w, s), n)| w * w * s * s / n).sum()
}

fn check_support(eval: &[f64], reference: &[f64]) -> Result<()> {
    match eval.iter().zip(reference).position(|(&p, &r)| p > 0.0 && r <= 0.0) {
        Some(index) => Err(Error::SupportViolation { index, mass: eval[index] }),
        None => Ok(()),
    }
}

/// DR-strat estimate of `E[g(X_m)]` from samples drawn under the reference.
pub fn dr_strat_estimate(batch: &SampleBatch, eval_pmf: &Pmf, ref_pmf: &Pmf, strat: &Stratification) -> Result<f64> {
    eval_pmf.ensure_same_grid(ref_pmf)?;
    strat.check_grid(ref_pmf.grid())?;
    check_support(eval_pmf.mass(), ref_pmf.mass())?;
    if batch.strata.len() != strat.num_strata() {
        return Err(Error::InvalidArgument("batch and stratification disagree on K".into()));
    }
    let omega_ref = stratum_masses(ref_pmf.mass(), strat);
    let (pm, pr) = (eval_pmf.mass(), ref_pmf.mass());
    let mut total = 0.0;
    for (k, samples) in batch.strata.iter().enumerate() {
        if samples.is_empty() {
            return Err(Error::EmptyStratum(k));
        }
        let weighted: f64 = samples.iter().filter(|s| s.output).map(|s| pm[s.index] / pr[s.index]).sum();
        total += omega_ref[k] * weighted / samples.len() as f64;
    }
    Ok(total)
}

/// Precomputed pieces of the DR-strat variance for a fixed reference,
/// stratification and conditional mean table. Shared by the inner solver,
/// the outer solver and the evaluation commands.
#[derive(Debug, Clone)]
pub struct VarianceModel {
    reference: Vec<f64>,
    omega_ref: Vec<f64>,
    means: Vec<f64>,
    strata: Vec<Vec<usize>>,
}

impl VarianceModel {
    pub fn new(ref_pmf: &Pmf, strat: &Stratification, means: &ConditionalMeanTable) -> Result<Self> {
        strat.check_grid(ref_pmf.grid())?;
        if means.len() != ref_pmf.len() {
            return Err(Error::GridMismatch);
        }
        Ok(Self {
            reference: ref_pmf.mass().to_vec(),
            omega_ref: stratum_masses(ref_pmf.mass(), strat),
            means: means.means().to_vec(),
            strata: strat.index_sets().to_vec(),
        })
    }

    pub fn num_strata(&self) -> usize {
        self.strata.len()
    }

    pub fn grid_len(&self) -> usize {
        self.reference.len()
    }

    pub fn omega_ref(&self) -> &[f64] {
        &self.omega_ref
    }

    /// Per-stratum brackets `B_k = omega_ref_k sum e_i p_i^2 / r_i - (sum e_i p_i)^2`,
    /// so that the variance is `sum_k B_k / n_k`.
    pub fn brackets(&self, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.reference.len() {
            return Err(Error::GridMismatch);
        }
        check_support(p, &self.reference)?;
        Ok(self.brackets_unchecked(p))
    }

    pub(crate) fn brackets_unchecked(&self, p: &[f64]) -> Vec<f64> {
        self.strata
            .iter()
            .enumerate()
            .map(|(k, set)| {
                let mut quad = 0.0;
                let mut lin = 0.0;
                for &i in set {
                    let ep = self.means[i] * p[i];
                    if ep != 0.0 {
                        quad += ep * p[i] / self.reference[i];
                        lin += ep;
                    }
                }
                // Cauchy-Schwarz makes this nonnegative; clip rounding residue.
                (self.omega_ref[k] * quad - lin * lin).max(0.0)
            })
            .collect()
    }

    pub fn check_budgets(&self, n: &[f64]) -> Result<()> {
        if n.len() != self.strata.len() {
            return Err(Error::InvalidArgument(format!(
                "allocation has {} entries for {} strata",
                n.len(),
                self.strata.len()
            )));
        }
        match n.iter().position(|&b| !(b >= MIN_STRATUM_BUDGET)) {
            Some(k) => Err(Error::ZeroBudgetStratum { stratum: k, budget: n[k] }),
            None => Ok(()),
        }
    }

    /// Variance of the DR-strat estimator at allocation `n` for eval masses `p`.
    pub fn variance(&self, n: &[f64], p: &[f64]) -> Result<f64> {
        self.check_budgets(n)?;
        Ok(self.brackets(p)?.iter().zip(n).map(|(b, n)| b / n).sum())
    }

    /// Gradient of [`Self::variance`] with respect to the eval masses `p`.
    pub fn gradient(&self, n: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        self.check_budgets(n)?;
        self.brackets(p)?;
        let inv_n: Vec<f64> = n.iter().map(|v| 1.0 / v).collect();
        let mut grad = vec![0.0; p.len()];
        self.gradient_unchecked(&inv_n, p, &mut grad);
        Ok(grad)
    }

    pub(crate) fn variance_unchecked(&self, inv_n: &[f64], p: &[f64]) -> f64 {
        self.brackets_unchecked(p).iter().zip(inv_n).map(|(b, w)| b * w).sum()
    }

    /// Gradient of [`Self::variance`] with respect to `p`, written into `grad`.
    pub(crate) fn gradient_unchecked(&self, inv_n: &[f64], p: &[f64], grad: &mut [f64]) {
        for (k, set) in self.strata.iter().enumerate() {
            let lin: f64 = set.iter().map(|&i| self.means[i] * p[i]).sum();
            for &i in set {
                let e = self.means[i];
                grad[i] = inv_n[k] * (2.0 * self.omega_ref[k] * e * p[i] / self.reference[i] - 2.0 * e * lin);
            }
        }
    }
}

/// Variance of the DR-strat estimator (indicator outputs).
pub fn dr_strat_variance(
    n: &AllocationVector,
    eval_pmf: &Pmf,
    ref_pmf: &Pmf,
    strat: &Stratification,
    means: &ConditionalMeanTable,
) -> Result<f64> {
    eval_pmf.ensure_same_grid(ref_pmf)?;
    VarianceModel::new(ref_pmf, strat, means)?.variance(n.budgets(), eval_pmf.mass())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{strata_probabilities, Grid};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn two_point() -> std::sync::Arc<Grid> {
        Grid::new(vec![0.0, 1.0]).unwrap()
    }

    fn sample(index: usize, output: bool) -> Sample {
        Sample { index, output }
    }

    #[test]
    fn true_mean_zero_table() {
        let g = Grid::regular(0.0, 1.0, 5).unwrap();
        let means = ConditionalMeanTable::new(vec![0.0; 5]).unwrap();
        assert_eq!(true_mean(&Pmf::uniform(g), &means).unwrap(), 0.0);
        assert!(ConditionalMeanTable::new(vec![1.5]).is_err());
    }

    #[test]
    fn crude_mc() {
        assert_eq!(crude_mc_estimate(&[false; 4]).unwrap(), 0.0);
        assert_eq!(crude_mc_estimate(&[true, false, false, true]).unwrap(), 0.5);
        assert_eq!(crude_mc_estimate(&[]), Err(Error::EmptyBatch));
    }

    #[test]
    fn stratified_weighted_means() {
        let batch = SampleBatch {
            strata: vec![(0..5).map(|j| sample(0, j == 0)).collect(), (0..5).map(|j| sample(1, j < 2)).collect()],
        };
        let omega = StrataProbabilities { omega: vec![0.5, 0.5] };
        assert_abs_diff_eq!(stratified_estimate(&batch, &omega).unwrap(), 0.3, epsilon = 1e-15);

        let single = SampleBatch { strata: vec![vec![sample(0, true), sample(1, false), sample(1, true)]] };
        let one = StrataProbabilities { omega: vec![1.0] };
        assert_eq!(stratified_estimate(&single, &one).unwrap(), crude_mc_estimate(&[true, false, true]).unwrap());

        let empty = SampleBatch { strata: vec![vec![], vec![sample(1, true)]] };
        assert_eq!(stratified_estimate(&empty, &omega), Err(Error::EmptyStratum(0)));
    }

    #[test]
    fn neyman_proportionality() {
        let w = StrataProbabilities { omega: vec![0.25; 4] };
        let n = neyman_allocation(&w, &[2.0; 4], 100.0).unwrap();
        assert_eq!(n.budgets(), &[25.0; 4]);
        let w = StrataProbabilities { omega: vec![0.5, 0.5] };
        let n = neyman_allocation(&w, &[1.0, 3.0], 100.0).unwrap();
        assert_eq!(n.budgets(), &[25.0, 75.0]);
        assert_eq!(neyman_allocation(&w, &[0.0, 0.0], 100.0), Err(Error::AllZeroProducts));
    }

    #[test]
    fn dr_estimate_hand_value() {
        let g = two_point();
        let r = Pmf::uniform(g.clone());
        let e = Pmf::new(g, vec![0.8, 0.2]).unwrap();
        let s = Stratification::equal_contiguous(2, 1).unwrap();
        let batch = SampleBatch { strata: vec![vec![sample(0, true), sample(1, false)]] };
        assert_abs_diff_eq!(dr_strat_estimate(&batch, &e, &r, &s).unwrap(), 0.8, epsilon = 1e-15);
    }

    #[test]
    fn dr_estimate_identity_case_is_stratified() {
        let g = Grid::regular(0.0, 1.0, 4).unwrap();
        let r = Pmf::new(g, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let s = Stratification::equal_contiguous(4, 2).unwrap();
        let batch = SampleBatch {
            strata: vec![
                vec![sample(0, true), sample(1, false), sample(1, true)],
                vec![sample(3, false), sample(2, true)],
            ],
        };
        let w = strata_probabilities(&r, &s).unwrap();
        assert_abs_diff_eq!(
            dr_strat_estimate(&batch, &r, &r, &s).unwrap(),
            stratified_estimate(&batch, &w).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn dr_estimate_support_violation() {
        let g = two_point();
        let r = Pmf::point_mass(g.clone(), 0).unwrap();
        let e = Pmf::uniform(g);
        let s = Stratification::equal_contiguous(2, 1).unwrap();
        let batch = SampleBatch { strata: vec![vec![sample(0, true)]] };
        assert!(matches!(dr_strat_estimate(&batch, &e, &r, &s), Err(Error::SupportViolation { index: 1, .. })));
    }

    #[test]
    fn variance_hand_algebra() {
        let g = two_point();
        let r = Pmf::uniform(g);
        let s = Stratification::equal_contiguous(2, 1).unwrap();
        let n = AllocationVector::integer(&[10]).unwrap();
        let zero = ConditionalMeanTable::new(vec![0.0, 0.0]).unwrap();
        assert_eq!(dr_strat_variance(&n, &r, &r, &s, &zero).unwrap(), 0.0);
        // K = 1 so omega_ref = 1: (1 * 0.5 - 0.25) / 10, the Bernoulli(1/2) variance over 10 draws.
        let step = ConditionalMeanTable::new(vec![1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(dr_strat_variance(&n, &r, &r, &s, &step).unwrap(), 0.025, epsilon = 1e-15);
        let ones = ConditionalMeanTable::new(vec![1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(dr_strat_variance(&n, &r, &r, &s, &ones).unwrap(), 0.0, epsilon = 1e-15);
        let halves = ConditionalMeanTable::new(vec![0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(dr_strat_variance(&n, &r, &r, &s, &halves).unwrap(), 0.025, epsilon = 1e-15);
    }

    #[test]
    fn variance_rejects_zero_budget() {
        let g = two_point();
        let r = Pmf::uniform(g);
        let s = Stratification::equal_contiguous(2, 2).unwrap();
        let m = ConditionalMeanTable::new(vec![0.3, 0.6]).unwrap();
        let n = AllocationVector::continuous(vec![1.0, 0.0]).unwrap();
        assert!(matches!(dr_strat_variance(&n, &r, &r, &s, &m), Err(Error::ZeroBudgetStratum { stratum: 1, .. })));
    }

    fn random_instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, usize)> {
        (3usize..9).prop_flat_map(|len| {
            (
                prop::collection::vec(0.05f64..1.0, len),
                prop::collection::vec(0.0f64..1.0, len),
                prop::collection::vec(0.0f64..1.0, len),
                prop::collection::vec(0.5f64..50.0, 1..=len),
                Just(len),
            )
        })
    }

    fn normalize(v: &[f64]) -> Vec<f64> {
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    }

    proptest! {
        #[test]
        fn variance_nonnegative_and_homogeneous((r, e, m, n, len) in random_instance(), c in 0.1f64..10.0) {
            let g = Grid::regular(0.0, 1.0, len).unwrap();
            let k = n.len();
            let s = Stratification::equal_contiguous(len, k).unwrap();
            let r = Pmf::new(g.clone(), normalize(&r)).unwrap();
            let e = if e.iter().sum::<f64>() > 0.0 { Pmf::new(g, normalize(&e)).unwrap() } else { r.clone() };
            let means = ConditionalMeanTable::new(m).unwrap();
            let n = AllocationVector::continuous(n).unwrap();
            let v = dr_strat_variance(&n, &e, &r, &s, &means).unwrap();
            prop_assert!(v >= 0.0);
            let vc = dr_strat_variance(&n.scaled(c), &e, &r, &s, &means).unwrap();
            prop_assert!((vc - v / c).abs() <= 1e-12 * v.abs().max(1e-300) + 1e-300);
        }

        #[test]
        fn variance_reduces_to_classical((r, _e, m, n, len) in random_instance()) {
            let g = Grid::regular(0.0, 1.0, len).unwrap();
            let s = Stratification::equal_contiguous(len, n.len()).unwrap();
            let r = Pmf::new(g, normalize(&r)).unwrap();
            let means = ConditionalMeanTable::new(m).unwrap();
            let omega = strata_probabilities(&r, &s).unwrap();
            let sigma = stratum_output_std(&r, &s, &means).unwrap();
            let alloc = AllocationVector::continuous(n.clone()).unwrap();
            let v = dr_strat_variance(&alloc, &r, &r, &s, &means).unwrap();
            let c = classical_stratified_variance(&omega.omega, &sigma, &n);
            prop_assert!((v - c).abs() <= 1e-10);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let g = Grid::regular(0.0, 1.0, 6).unwrap();
        let r = Pmf::new(g, vec![0.1, 0.2, 0.15, 0.25, 0.2, 0.1]).unwrap();
        let s = Stratification::equal_contiguous(6, 2).unwrap();
        let means = ConditionalMeanTable::new(vec![0.1, 0.5, 0.9, 0.3, 0.7, 0.2]).unwrap();
        let vm = VarianceModel::new(&r, &s, &means).unwrap();
        let inv_n = [1.0 / 7.0, 1.0 / 3.0];
        let p = [0.2, 0.1, 0.2, 0.15, 0.2, 0.15];
        let mut grad = [0.0; 6];
        vm.gradient_unchecked(&inv_n, &p, &mut grad);
        let h = 1e-6;
        for i in 0..6 {
            let mut up = p;
            let mut dn = p;
            up[i] += h;
            dn[i] -= h;
            let fd = (vm.variance_unchecked(&inv_n, &up) - vm.variance_unchecked(&inv_n, &dn)) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-5 * grad[i].abs().max(1e-8));
        }
    }
}
