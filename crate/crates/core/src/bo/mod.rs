//! Outer minimization of the worst-case variance over allocations by
//! Bayesian optimization, and the nominal-only (Str-M) benchmark.
//!
//! The GP models `ln v(n)` against budget fractions `n / N_T`. Continuous
//! proposals are rounded at the end and the best integer allocation is chosen
//! by re-evaluating the objective there.

pub mod acquisition;
pub mod gp;

use serde::{Deserialize, Serialize};

use crate::dist::Pmf;
use crate::error::{Error, Result};
use crate::estimators::AllocationVector;
use crate::inner::InnerSolver;
use crate::rng::substream;
use acquisition::{propose_next, AcquisitionConfig, Slab};
use gp::gp_fit;

pub use acquisition::{expected_improvement, expected_improvement_with_gradient};
pub use gp::{GpSurrogate, Prediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "DR-Str")]
    DrStr,
    #[serde(rename = "Str-M")]
    StrM,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Self::DrStr => "DR-Str",
            Self::StrM => "Str-M",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoConfig {
    /// Initial design size; `None` means `max(2K, 10)`.
    pub n_initial: Option<usize>,
    pub n_iterations: usize,
    /// Minimum continuous budget per stratum during the search.
    pub floor: f64,
    pub acq_restarts: usize,
    pub acq_candidates: usize,
    /// Best continuous points rounded and re-evaluated at the end.
    pub round_candidates: usize,
    pub seed: u64,
}

impl Default for BoConfig {
    fn default() -> Self {
        Self {
            n_initial: None,
            n_iterations: 60,
            floor: 1.0,
            acq_restarts: 8,
            acq_candidates: 512,
            round_candidates: 5,
            seed: 0,
        }
    }
}

impl BoConfig {
    pub fn initial_size(&self, strata: usize) -> usize {
        self.n_initial.unwrap_or((2 * strata).max(10))
    }

    pub fn validate(&self, strata: usize, budget: u64) -> Result<()> {
        if budget < strata as u64 {
            return Err(Error::InfeasibleBudget { budget: budget as f64, strata, floor: 1.0 });
        }
        if !(self.floor > 0.0) || self.floor * strata as f64 >= budget as f64 {
            return Err(Error::InfeasibleBudget { budget: budget as f64, strata, floor: self.floor });
        }
        if let Some(n) = self.n_initial {
            if n < strata + 1 {
                return Err(Error::InvalidArgument(format!(
                    "initial design needs at least K + 1 = {} points, got {n}",
                    strata + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    /// `"initial"` for the design points, `"bo"` for acquisition proposals.
    pub phase: &'static str,
    pub allocation: Vec<f64>,
    pub value: f64,
    pub best_so_far: f64,
}

/// An integer allocation considered in the final rounding step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundedCandidate {
    pub allocation: Vec<u64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub method: Method,
    pub budget: u64,
    pub best_allocation: Vec<u64>,
    pub best_value: f64,
    /// Per-model objective at the best allocation: worst-case variances for
    /// DR-Str, nominal variances for Str-M.
    pub per_model_values: Vec<f64>,
    #[serde(skip)]
    pub witnesses: Vec<Pmf>,
    pub trace: Vec<TraceRow>,
    pub rounding: Vec<RoundedCandidate>,
}

/// Sum-preserving largest-remainder rounding with every stratum at least 1.
/// Ties go to the lower stratum index.
pub fn round_allocation(n: &[f64], budget: u64) -> Result<Vec<u64>> {
    let k = n.len();
    if k == 0 {
        return Err(Error::InvalidArgument("empty allocation".into()));
    }
    if budget < k as u64 {
        return Err(Error::InfeasibleBudget { budget: budget as f64, strata: k, floor: 1.0 });
    }
    if n.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument("allocation entries must be finite and nonnegative".into()));
    }
    let total: f64 = n.iter().sum();
    if (total - budget as f64).abs() > 1e-6 * (budget as f64).max(1.0) {
        return Err(Error::InvalidArgument(format!("allocation sums to {total}, expected {budget}")));
    }
    let mut counts: Vec<u64> = n.iter().map(|v| (v.floor() as u64).max(1)).collect();
    let remainder = |c: &[u64], i: usize| n[i] - c[i] as f64;
    let mut assigned: u64 = counts.iter().sum();
    let mut order: Vec<usize> = (0..k).collect();
    if assigned < budget {
        order.sort_by(|&a, &b| remainder(&counts, b).total_cmp(&remainder(&counts, a)).then(a.cmp(&b)));
        let mut it = order.iter().cycle();
        while assigned < budget {
            counts[*it.next().expect("nonempty")] += 1;
            assigned += 1;
        }
    } else if assigned > budget {
        // The floor of 1 pushed the total over; take units back where the
        // rounding gave away the least.
        while assigned > budget {
            let i = (0..k)
                .filter(|&i| counts[i] > 1)
                .min_by(|&a, &b| remainder(&counts, a).total_cmp(&remainder(&counts, b)).then(a.cmp(&b)))
                .expect("budget >= K leaves a stratum above 1");
            counts[i] -= 1;
            assigned -= 1;
        }
    }
    Ok(counts)
}

struct Evaluation {
    u: Vec<f64>,
    value: f64,
}

/// Minimizes `objective` (defined on budgets summing to `budget`) by BO and
/// returns the trace, best rounded allocation and its value.
fn minimize<F>(
    objective: F,
    strata: usize,
    budget: u64,
    config: &BoConfig,
    stream_tag: u64,
    seeds: &[Vec<f64>],
    integer_candidates: &[Vec<u64>],
) -> Result<(Vec<TraceRow>, Vec<RoundedCandidate>, usize)>
where
    F: Fn(&AllocationVector) -> Result<f64>,
{
    config.validate(strata, budget)?;
    let total = budget as f64;
    let slab = Slab { dim: strata, lower: config.floor / total };
    let eval_u =
        |u: &[f64]| -> Result<f64> { objective(&AllocationVector::continuous(u.iter().map(|v| v * total).collect())?) };
    let mut evals: Vec<Evaluation> = Vec::new();
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut best = f64::INFINITY;
    let mut record = |evals: &mut Vec<Evaluation>, u: Vec<f64>, value: f64, phase: &'static str| {
        best = best.min(value);
        trace.push(TraceRow {
            iteration: trace.len(),
            phase,
            allocation: u.iter().map(|v| v * total).collect(),
            value,
            best_so_far: best,
        });
        evals.push(Evaluation { u, value });
    };

    if strata == 1 {
        let value = eval_u(&[1.0])?;
        record(&mut evals, vec![1.0], value, "initial");
        let rounded = RoundedCandidate { allocation: vec![budget], value };
        return Ok((trace, vec![rounded], 0));
    }

    let mut design: Vec<Vec<f64>> = vec![vec![1.0 / strata as f64; strata]];
    for s in seeds {
        let u = slab.project(&s.iter().map(|v| v / total).collect::<Vec<_>>());
        if !design.iter().any(|d| max_diff(d, &u) < gp::DUPLICATE_TOL) {
            design.push(u);
        }
    }
    let mut rng = substream(config.seed, &[stream_tag, 0]);
    while design.len() < config.initial_size(strata) {
        design.push(slab.sample(&mut rng));
    }
    for u in design {
        let value = eval_u(&u)?;
        record(&mut evals, u, value, "initial");
    }

    let acq = AcquisitionConfig {
        candidates: config.acq_candidates,
        restarts: config.acq_restarts,
        ..AcquisitionConfig::default()
    };
    for it in 0..config.n_iterations {
        let xs: Vec<Vec<f64>> = evals.iter().map(|e| e.u.clone()).collect();
        let ys: Vec<f64> = evals.iter().map(|e| e.value.max(f64::MIN_POSITIVE).ln()).collect();
        let model = gp_fit(&xs, &ys)?;
        let log_best = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut rng = substream(config.seed, &[stream_tag, 1 + it as u64]);
        let (u, _) = propose_next(&model, log_best, slab, &acq, &mut rng);
        let value = eval_u(&u)?;
        record(&mut evals, u, value, "bo");
    }

    // Round the best distinct continuous points and any supplied integer
    // candidates, then keep the best integer allocation.
    let mut order: Vec<usize> = (0..evals.len()).collect();
    order.sort_by(|&a, &b| evals[a].value.total_cmp(&evals[b].value).then(a.cmp(&b)));
    let mut candidates: Vec<Vec<u64>> = Vec::new();
    for &i in order.iter().take(config.round_candidates.max(1)) {
        let n: Vec<f64> = evals[i].u.iter().map(|v| v * total).collect();
        let r = round_allocation(&n, budget)?;
        if !candidates.contains(&r) {
            candidates.push(r);
        }
    }
    let uniform = round_allocation(&vec![total / strata as f64; strata], budget)?;
    for c in integer_candidates.iter().chain(std::iter::once(&uniform)) {
        if c.len() == strata && c.iter().sum::<u64>() == budget && c.iter().all(|&v| v >= 1) && !candidates.contains(c)
        {
            candidates.push(c.clone());
        }
    }
    let mut rounding = Vec::with_capacity(candidates.len());
    let mut best_index = 0;
    for (j, c) in candidates.into_iter().enumerate() {
        let value = objective(&AllocationVector::integer(&c)?)?;
        if value < rounding.get(best_index).map_or(f64::INFINITY, |r: &RoundedCandidate| r.value) {
            best_index = j;
        }
        rounding.push(RoundedCandidate { allocation: c, value });
    }
    Ok((trace, rounding, best_index))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Allocations `n_k ∝ sqrt(B_k)` that minimize each nominal's variance alone.
fn nominal_optima(solver: &InnerSolver, budget: u64) -> Vec<Vec<f64>> {
    solver
        .sets()
        .iter()
        .filter_map(|set| {
            let b = solver.model().brackets(set.nominal().mass()).ok()?;
            let roots: Vec<f64> = b.iter().map(|v| v.sqrt()).collect();
            let s: f64 = roots.iter().sum();
            (s > 0.0).then(|| roots.iter().map(|r| budget as f64 * r / s).collect())
        })
        .collect()
}

const STR_M_STREAM: u64 = 0x5743;
const DR_STREAM: u64 = 0xd257;

/// Str-M: minimize the largest variance over the nominal models only.
pub fn solve_str_m(solver: &InnerSolver, budget: u64, config: &BoConfig) -> Result<SolveReport> {
    let strata = solver.model().num_strata();
    let seeds = nominal_optima(solver, budget);
    let objective = |n: &AllocationVector| solver.nominal_variance(n);
    let (trace, rounding, best) = minimize(objective, strata, budget, config, STR_M_STREAM, &seeds, &[])?;
    let best_allocation = rounding[best].allocation.clone();
    let n = AllocationVector::integer(&best_allocation)?;
    let per_model_values = solver
        .sets()
        .iter()
        .map(|s| solver.model().variance(n.budgets(), s.nominal().mass()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SolveReport {
        method: Method::StrM,
        budget,
        best_value: rounding[best].value,
        best_allocation,
        per_model_values,
        witnesses: solver.sets().iter().map(|s| s.nominal().clone()).collect(),
        trace,
        rounding,
    })
}

/// DR-Str: minimize the worst-case variance over the ambiguity sets.
///
/// `str_m_allocation`, when given, joins both the initial design and the final
/// integer candidates, so the result is never worse than Str-M on this objective.
pub fn solve_dr_strat(
    solver: &InnerSolver,
    budget: u64,
    config: &BoConfig,
    str_m_allocation: Option<&[u64]>,
) -> Result<SolveReport> {
    let strata = solver.model().num_strata();
    let mut seeds: Vec<Vec<f64>> = Vec::new();
    let mut integer = Vec::new();
    if let Some(a) = str_m_allocation {
        seeds.push(a.iter().map(|&v| v as f64).collect());
        integer.push(a.to_vec());
    }
    seeds.extend(nominal_optima(solver, budget));
    let objective = |n: &AllocationVector| solver.evaluate(n).map(|r| r.value);
    let (trace, rounding, best) = minimize(objective, strata, budget, config, DR_STREAM, &seeds, &integer)?;
    let best_allocation = rounding[best].allocation.clone();
    let result = solver.evaluate(&AllocationVector::integer(&best_allocation)?)?;
    Ok(SolveReport {
        method: Method::DrStr,
        budget,
        best_value: result.value,
        best_allocation,
        per_model_values: result.per_model_values,
        witnesses: result.per_model_pmfs,
        trace,
        rounding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_examples() {
        assert_eq!(round_allocation(&[33.4, 33.3, 33.3], 100).unwrap(), vec![34, 33, 33]);
        assert_eq!(round_allocation(&[0.2, 0.2, 99.6], 100).unwrap(), vec![1, 1, 98]);
        assert_eq!(round_allocation(&[10.0, 20.0, 70.0], 100).unwrap(), vec![10, 20, 70]);
        // equal remainders: lower index first
        assert_eq!(round_allocation(&[1.5, 1.5, 2.0], 5).unwrap(), vec![2, 1, 2]);
        assert!(matches!(round_allocation(&[0.5, 0.5, 1.0], 2), Err(Error::InfeasibleBudget { .. })));
    }

    #[test]
    fn rounding_always_sums_to_budget() {
        let mut rng = substream(11, &[]);
        let slab = Slab { dim: 6, lower: 0.0 };
        for _ in 0..500 {
            let u = slab.sample(&mut rng);
            let n: Vec<f64> = u.iter().map(|v| v * 37.0).collect();
            let r = round_allocation(&n, 37).unwrap();
            assert_eq!(r.iter().sum::<u64>(), 37);
            assert!(r.iter().all(|&v| v >= 1));
        }
    }

    #[test]
    fn config_validation() {
        let c = BoConfig::default();
        assert!(c.validate(7, 100).is_ok());
        assert!(c.validate(7, 7).is_err());
        assert!(BoConfig { n_initial: Some(3), ..c }.validate(7, 100).is_err());
        assert_eq!(c.initial_size(3), 10);
        assert_eq!(c.initial_size(22), 44);
    }
}
