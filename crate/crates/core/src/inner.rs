//! Inner maximization: the worst-case DR-strat variance over every model's
//! ambiguity set at a fixed allocation.
//!
//! Parametric sets are enumerated. The discrepancy and moment sets use
//! multi-start projected gradient ascent; the objective is nonconvex in the
//! pmf, so the result is the best local maximum found, which is a lower bound
//! on the true maximum.

use rayon::prelude::*;
use serde::Serialize;

use crate::ambiguity::projection::l2_norm_diff;
use crate::ambiguity::AmbiguitySet;
use crate::dist::{Pmf, Stratification};
use crate::error::{Error, Result};
use crate::estimators::{AllocationVector, ConditionalMeanTable, VarianceModel};
use crate::rng::substream;

pub const DEFAULT_STARTS: usize = 16;
pub const DEFAULT_MAX_ITERATIONS: usize = 2000;
/// Stationarity threshold on the gradient mapping `|P(p + t g) - p| / t`.
pub const GRADIENT_TOL: f64 = 1e-9;
const ARMIJO_C: f64 = 1e-4;
/// Ascent also stops when an accepted step improves the objective by less than
/// this fraction of its value.
const STALL_TOL: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InnerConfig {
    /// Ascent starts per set: the nominal plus `starts - 1` random members.
    pub starts: usize,
    pub max_iterations: usize,
    /// Seeds the random starts. The starts do not depend on the allocation,
    /// so the worst-case value is a deterministic function of it.
    pub seed: u64,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self { starts: DEFAULT_STARTS, max_iterations: DEFAULT_MAX_ITERATIONS, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StartDiagnostics {
    pub start: usize,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetMaximum {
    pub value: f64,
    pub pmf: Pmf,
    pub diagnostics: Vec<StartDiagnostics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerResult {
    pub value: f64,
    pub argmax_model: usize,
    pub argmax_pmf: Pmf,
    pub per_model_values: Vec<f64>,
    pub per_model_pmfs: Vec<Pmf>,
    pub diagnostics: Vec<Vec<StartDiagnostics>>,
}

/// Worst-case variance evaluator for a fixed problem; `evaluate` may be called
/// at many allocations.
#[derive(Debug, Clone)]
pub struct InnerSolver {
    model: VarianceModel,
    sets: Vec<AmbiguitySet>,
    config: InnerConfig,
}

impl InnerSolver {
    pub fn new(
        sets: Vec<AmbiguitySet>,
        ref_pmf: &Pmf,
        strat: &Stratification,
        means: &ConditionalMeanTable,
        config: InnerConfig,
    ) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::InvalidAmbiguitySet("no input models".into()));
        }
        if config.starts == 0 {
            return Err(Error::InvalidArgument("at least one ascent start is required".into()));
        }
        for set in &sets {
            set.nominal().ensure_same_grid(ref_pmf)?;
            check_set_support(set, ref_pmf)?;
        }
        let model = VarianceModel::new(ref_pmf, strat, means)?;
        Ok(Self { model, sets, config })
    }

    pub fn sets(&self) -> &[AmbiguitySet] {
        &self.sets
    }

    pub fn model(&self) -> &VarianceModel {
        &self.model
    }

    pub fn config(&self) -> &InnerConfig {
        &self.config
    }

    /// Largest nominal variance over the models (the Str-M objective).
    pub fn nominal_variance(&self, n: &AllocationVector) -> Result<f64> {
        self.model.check_budgets(n.budgets())?;
        let mut best = f64::NEG_INFINITY;
        for set in &self.sets {
            best = best.max(self.model.variance(n.budgets(), set.nominal().mass())?);
        }
        Ok(best)
    }

    pub fn maximize_model(&self, n: &AllocationVector, m: usize) -> Result<SetMaximum> {
        let set = self.sets.get(m).ok_or_else(|| Error::InvalidArgument(format!("model index {m} out of range")))?;
        maximize_with_model(&self.model, n, set, m, &self.config)
    }

    pub fn evaluate(&self, n: &AllocationVector) -> Result<InnerResult> {
        self.model.check_budgets(n.budgets())?;
        let results: Vec<Result<SetMaximum>> =
            (0..self.sets.len()).into_par_iter().map(|m| self.maximize_model(n, m)).collect();
        let mut first_error = None;
        let mut per_model_values = Vec::with_capacity(results.len());
        let mut per_model_pmfs = Vec::with_capacity(results.len());
        let mut diagnostics = Vec::with_capacity(results.len());
        let mut best: Option<usize> = None;
        for (m, r) in results.into_iter().enumerate() {
            match r {
                Ok(found) => {
                    // Strict comparison keeps the lowest index on ties.
                    if best.is_none_or(|b| found.value > per_model_values[b]) {
                        best = Some(m);
                    }
                    per_model_values.push(found.value);
                    per_model_pmfs.push(found.pmf);
                    diagnostics.push(found.diagnostics);
                }
                Err(e) => {
                    log::warn!("inner solve failed for model {m}: {e}");
                    first_error.get_or_insert(e);
                    per_model_values.push(f64::NEG_INFINITY);
                    per_model_pmfs.push(self.sets[m].nominal().clone());
                    diagnostics.push(Vec::new());
                }
            }
        }
        let Some(best) = best else {
            return Err(Error::InnerSolverFailure(first_error.map(|e| e.to_string()).unwrap_or_default()));
        };
        if log::log_enabled!(log::Level::Debug) {
            let record = serde_json::json!({
                "allocation": n.budgets(),
                "value": per_model_values[best],
                "argmax_model": best,
                "models": diagnostics,
            });
            log::debug!("{record}");
        }
        Ok(InnerResult {
            value: per_model_values[best],
            argmax_model: best,
            argmax_pmf: per_model_pmfs[best].clone(),
            per_model_values,
            per_model_pmfs,
            diagnostics,
        })
    }
}

fn check_set_support(set: &AmbiguitySet, ref_pmf: &Pmf) -> Result<()> {
    let positive = |p: &[f64]| match p.iter().zip(ref_pmf.mass()).position(|(&a, &r)| a > 0.0 && r <= 0.0) {
        Some(index) => Err(Error::SupportViolation { index, mass: p[index] }),
        None => Ok(()),
    };
    match set.parametric_members() {
        Some(members) => members.iter().try_for_each(|m| positive(m.mass())),
        None if set.is_singleton() => positive(set.nominal().mass()),
        // Continuous sets can move mass anywhere on the grid.
        None => match ref_pmf.mass().iter().position(|&r| r <= 0.0) {
            Some(index) => Err(Error::SupportViolation { index, mass: 0.0 }),
            None => Ok(()),
        },
    }
}

/// Worst case over all models at allocation `n`.
pub fn worst_case_variance(
    n: &AllocationVector,
    sets: &[AmbiguitySet],
    ref_pmf: &Pmf,
    strat: &Stratification,
    means: &ConditionalMeanTable,
    config: &InnerConfig,
) -> Result<InnerResult> {
    InnerSolver::new(sets.to_vec(), ref_pmf, strat, means, *config)?.evaluate(n)
}

/// Worst case over one ambiguity set at allocation `n`.
pub fn maximize_over_set(
    n: &AllocationVector,
    set: &AmbiguitySet,
    ref_pmf: &Pmf,
    strat: &Stratification,
    means: &ConditionalMeanTable,
    config: &InnerConfig,
) -> Result<SetMaximum> {
    set.nominal().ensure_same_grid(ref_pmf)?;
    check_set_support(set, ref_pmf)?;
    let model = VarianceModel::new(ref_pmf, strat, means)?;
    maximize_with_model(&model, n, set, 0, config)
}

fn maximize_with_model(
    model: &VarianceModel,
    n: &AllocationVector,
    set: &AmbiguitySet,
    model_index: usize,
    config: &InnerConfig,
) -> Result<SetMaximum> {
    model.check_budgets(n.budgets())?;
    if let Some(members) = set.parametric_members() {
        let mut best = 0;
        let mut best_value = f64::NEG_INFINITY;
        for (j, p) in members.iter().enumerate() {
            let v = model.variance(n.budgets(), p.mass())?;
            if v > best_value {
                best_value = v;
                best = j;
            }
        }
        return Ok(SetMaximum { value: best_value, pmf: members[best].clone(), diagnostics: Vec::new() });
    }
    let nominal = set.nominal();
    if set.is_singleton() {
        let value = model.variance(n.budgets(), nominal.mass())?;
        return Ok(SetMaximum { value, pmf: nominal.clone(), diagnostics: Vec::new() });
    }

    // Ascend on the variance with budgets normalized to unit total inverse, so
    // the path is invariant to rescaling the allocation.
    let inv_n: Vec<f64> = n.budgets().iter().map(|b| 1.0 / b).collect();
    let norm: f64 = inv_n.iter().sum();
    let weights: Vec<f64> = inv_n.iter().map(|w| w / norm).collect();

    let starts: Vec<Vec<f64>> = (0..config.starts)
        .map(|s| {
            if s == 0 {
                nominal.mass().to_vec()
            } else {
                let mut rng = substream(config.seed, &[model_index as u64, s as u64]);
                set.sample_member_with(&mut rng).into_mass()
            }
        })
        .collect();
    let runs: Vec<Result<(Vec<f64>, StartDiagnostics)>> = starts
        .into_par_iter()
        .enumerate()
        .map(|(s, p0)| ascend(model, set, &weights, norm, p0, s, config.max_iterations))
        .collect();

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut diagnostics = Vec::with_capacity(runs.len());
    let mut first_error = None;
    for run in runs {
        match run {
            Ok((p, diag)) => {
                if best.as_ref().is_none_or(|(_, v)| diag.value > *v) {
                    best = Some((p, diag.value));
                }
                diagnostics.push(diag);
            }
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    let Some((p, _)) = best else {
        return Err(first_error.unwrap_or(Error::NoStartConverged));
    };
    let pmf = Pmf::new(nominal.grid().clone(), p)?;
    let value = model.variance(n.budgets(), pmf.mass())?;
    Ok(SetMaximum { value, pmf, diagnostics })
}

/// Projected gradient ascent with Armijo backtracking from one start.
fn ascend(
    model: &VarianceModel,
    set: &AmbiguitySet,
    weights: &[f64],
    scale: f64,
    start: Vec<f64>,
    index: usize,
    max_iterations: usize,
) -> Result<(Vec<f64>, StartDiagnostics)> {
    let projector = set.projector()?;
    let mut p = start;
    let mut f = model.variance_unchecked(weights, &p);
    let mut grad = vec![0.0; p.len()];
    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iterations {
        iterations += 1;
        model.gradient_unchecked(weights, &p, &mut grad);
        let mut accepted = None;
        let mut t = step;
        let mut projection_error = None;
        for _ in 0..60 {
            let y: Vec<f64> = p.iter().zip(&grad).map(|(a, g)| a + t * g).collect();
            // A failed projection of a long step is treated as a rejected step.
            let q = match projector.project(&y) {
                Ok(q) => q,
                Err(e) => {
                    projection_error = Some(e);
                    t *= 0.5;
                    continue;
                }
            };
            projection_error = None;
            let ascent: f64 = grad.iter().zip(q.iter().zip(&p)).map(|(g, (a, b))| g * (a - b)).sum();
            let fq = model.variance_unchecked(weights, &q);
            if fq >= f + ARMIJO_C * ascent {
                accepted = Some((q, fq, t));
                break;
            }
            t *= 0.5;
        }
        let Some((q, fq, t)) = accepted else {
            if let Some(e) = projection_error {
                return Err(e);
            }
            // No step improves: the projected gradient has vanished to rounding.
            converged = true;
            break;
        };
        let mapping = l2_norm_diff(&q, &p) / t;
        let gain = fq - f;
        p = q;
        f = fq;
        if mapping < GRADIENT_TOL || gain <= STALL_TOL * f.abs() {
            converged = true;
            break;
        }
        // Grow the trial step after a first-try acceptance, but never past a
        // move of 10 in any coordinate: every set lies in the unit simplex.
        let gmax = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        step = if t == step { 2.0 * t } else { t };
        if gmax > 0.0 {
            step = step.min(10.0 / gmax);
        }
    }
    // The objective is convex in the pmf, so a full step to the vertex that
    // maximizes its linearization never loses value.
    while iterations < max_iterations {
        model.gradient_unchecked(weights, &p, &mut grad);
        let Some(v) = projector.linear_maximizer(&grad) else { break };
        let ascent: f64 = grad.iter().zip(v.iter().zip(&p)).map(|(g, (a, b))| g * (a - b)).sum();
        let fv = model.variance_unchecked(weights, &v);
        if ascent <= STALL_TOL * f.abs() || fv <= f {
            break;
        }
        iterations += 1;
        p = v;
        f = fv;
    }
    let diag = StartDiagnostics { start: index, value: f * scale, iterations, converged };
    Ok((p, diag))
}

/// Exhaustive search over the simplex lattice `{c / resolution}` (plus the
/// nominal) intersected with the set. Test oracle for grids of at most six points.
pub fn brute_force_inner(
    n: &AllocationVector,
    set: &AmbiguitySet,
    ref_pmf: &Pmf,
    strat: &Stratification,
    means: &ConditionalMeanTable,
    resolution: usize,
) -> Result<(f64, Pmf)> {
    const MAX_POINTS: usize = 6;
    let len = ref_pmf.len();
    if len > MAX_POINTS {
        return Err(Error::GridTooLarge { size: len, max: MAX_POINTS });
    }
    if resolution == 0 {
        return Err(Error::InvalidArgument("lattice resolution must be positive".into()));
    }
    set.nominal().ensure_same_grid(ref_pmf)?;
    let model = VarianceModel::new(ref_pmf, strat, means)?;
    let budgets = n.budgets();
    model.check_budgets(budgets)?;

    let mut best = set.nominal().mass().to_vec();
    let mut best_value = model.variance(budgets, &best)?;
    let mut counts = vec![0usize; len];
    let mut consider = |counts: &[usize]| -> Result<()> {
        let p: Vec<f64> = counts.iter().map(|&c| c as f64 / resolution as f64).collect();
        if set.contains_mass(&p, 1e-12) && model.brackets(&p).is_ok() {
            let v = model.variance(budgets, &p)?;
            if v > best_value {
                best_value = v;
                best = p;
            }
        }
        Ok(())
    };
    compositions(&mut counts, 0, resolution, &mut consider)?;
    let pmf = Pmf::new(ref_pmf.grid().clone(), best)?;
    Ok((best_value, pmf))
}

/// [`brute_force_inner`] followed by `levels` rounds of local zooming: around
/// each of the best feasible points found so far, a lattice five times finer
/// spanning one old step in every direction is searched. Test oracle for grids
/// of at most six points.
pub fn brute_force_inner_refined(
    n: &AllocationVector,
    set: &AmbiguitySet,
    ref_pmf: &Pmf,
    strat: &Stratification,
    means: &ConditionalMeanTable,
    resolution: usize,
    levels: usize,
) -> Result<(f64, Pmf)> {
    const KEEP: usize = 20;
    const ZOOM: i64 = 5;
    let (coarse_value, coarse) = brute_force_inner(n, set, ref_pmf, strat, means, resolution)?;
    let model = VarianceModel::new(ref_pmf, strat, means)?;
    let budgets = n.budgets();
    let len = ref_pmf.len();
    let value_of = |p: &[f64]| -> Option<f64> {
        if p.iter().all(|&v| v >= 0.0) && set.contains_mass(p, 1e-12) && model.brackets(p).is_ok() {
            model.variance(budgets, p).ok()
        } else {
            None
        }
    };
    let mut top: Vec<(f64, Vec<f64>)> = vec![(coarse_value, coarse.mass().to_vec())];
    let mut counts = vec![0usize; len];
    compositions(&mut counts, 0, resolution, &mut |c: &[usize]| {
        let p: Vec<f64> = c.iter().map(|&v| v as f64 / resolution as f64).collect();
        if let Some(v) = value_of(&p) {
            keep_best(&mut top, v, p, KEEP);
        }
        Ok(())
    })?;
    let mut step = 1.0 / resolution as f64;
    let mut offsets = vec![0i64; len - 1];
    for _ in 0..levels {
        step /= ZOOM as f64;
        let centers: Vec<Vec<f64>> = top.iter().map(|(_, p)| p.clone()).collect();
        for center in &centers {
            offsets.iter_mut().for_each(|o| *o = -ZOOM);
            loop {
                let mut p = center.clone();
                let mut shift = 0.0;
                for (i, &o) in offsets.iter().enumerate() {
                    p[i] += o as f64 * step;
                    shift += o as f64 * step;
                }
                p[len - 1] -= shift;
                if let Some(v) = value_of(&p) {
                    keep_best(&mut top, v, p, KEEP);
                }
                // Odometer over the offset box.
                let Some(i) = offsets.iter().position(|&o| o < ZOOM) else { break };
                offsets[i] += 1;
                offsets[..i].iter_mut().for_each(|o| *o = -ZOOM);
            }
        }
    }
    let (value, p) = top.swap_remove(0);
    Ok((value, Pmf::new(ref_pmf.grid().clone(), p.iter().map(|v| v.max(0.0)).collect())?))
}

/// Inserts `(value, p)` into a list sorted by decreasing value, capped at `keep`.
fn keep_best(top: &mut Vec<(f64, Vec<f64>)>, value: f64, p: Vec<f64>, keep: usize) {
    if top.len() == keep && value <= top[keep - 1].0 {
        return;
    }
    if top.iter().any(|(_, q)| q == &p) {
        return;
    }
    let at = top.partition_point(|(v, _)| *v >= value);
    top.insert(at, (value, p));
    top.truncate(keep);
}

fn compositions(
    counts: &mut [usize],
    pos: usize,
    remaining: usize,
    visit: &mut dyn FnMut(&[usize]) -> Result<()>,
) -> Result<()> {
    if pos + 1 == counts.len() {
        counts[pos] = remaining;
        return visit(counts);
    }
    for c in 0..=remaining {
        counts[pos] = c;
        compositions(counts, pos + 1, remaining - c, visit)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::Grid;

    fn small_problem() -> (Pmf, Stratification, ConditionalMeanTable, Pmf) {
        let grid = Grid::new(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let reference = Pmf::new(grid.clone(), vec![0.25; 4]).unwrap();
        let strat = Stratification::equal_contiguous(4, 2).unwrap();
        let means = ConditionalMeanTable::new(vec![0.05, 0.2, 0.5, 0.9]).unwrap();
        let nominal = Pmf::new(grid, vec![0.3, 0.3, 0.2, 0.2]).unwrap();
        (reference, strat, means, nominal)
    }

    #[test]
    fn singleton_set_returns_nominal_value() {
        let (r, strat, means, c) = small_problem();
        let n = AllocationVector::integer(&[5, 7]).unwrap();
        let set = AmbiguitySet::l2(c.clone(), 0.0).unwrap();
        let got = maximize_over_set(&n, &set, &r, &strat, &means, &InnerConfig::default()).unwrap();
        let model = VarianceModel::new(&r, &strat, &means).unwrap();
        assert_eq!(got.value, model.variance(n.budgets(), c.mass()).unwrap());
        assert_eq!(got.pmf, c);
    }

    #[test]
    fn ascent_beats_random_members() {
        let (r, strat, means, c) = small_problem();
        let n = AllocationVector::integer(&[4, 6]).unwrap();
        let set = AmbiguitySet::l2(c.clone(), 0.15).unwrap();
        let got = maximize_over_set(&n, &set, &r, &strat, &means, &InnerConfig::default()).unwrap();
        assert!(set.contains(&got.pmf, 1e-8).unwrap());
        let model = VarianceModel::new(&r, &strat, &means).unwrap();
        for seed in 0..10_000 {
            let q = set.sample_member(seed);
            assert!(model.variance(n.budgets(), q.mass()).unwrap() <= got.value + 1e-9);
        }
    }

    #[test]
    fn lattice_values_refine_monotonically() {
        let (r, strat, means, c) = small_problem();
        let n = AllocationVector::integer(&[4, 6]).unwrap();
        let set = AmbiguitySet::l2(c, 0.15).unwrap();
        let coarse = brute_force_inner(&n, &set, &r, &strat, &means, 10).unwrap().0;
        let fine = brute_force_inner(&n, &set, &r, &strat, &means, 20).unwrap().0;
        assert!(fine >= coarse);
    }

    #[test]
    fn large_grid_rejected_by_oracle() {
        let grid = Grid::regular(0.0, 1.0, 7).unwrap();
        let r = Pmf::uniform(grid);
        let strat = Stratification::equal_contiguous(7, 1).unwrap();
        let means = ConditionalMeanTable::new(vec![0.5; 7]).unwrap();
        let set = AmbiguitySet::l2(r.clone(), 0.1).unwrap();
        let n = AllocationVector::integer(&[10]).unwrap();
        assert!(matches!(
            brute_force_inner(&n, &set, &r, &strat, &means, 4),
            Err(Error::GridTooLarge { size: 7, max: 6 })
        ));
    }

    #[test]
    fn ties_between_models_go_to_lowest_index() {
        let (r, strat, means, c) = small_problem();
        let sets = vec![AmbiguitySet::l2(c.clone(), 0.0).unwrap(), AmbiguitySet::l2(c, 0.0).unwrap()];
        let n = AllocationVector::integer(&[3, 3]).unwrap();
        let res = worst_case_variance(&n, &sets, &r, &strat, &means, &InnerConfig::default()).unwrap();
        assert_eq!(res.argmax_model, 0);
    }

    #[test]
    fn refined_oracle_improves_on_its_lattice() {
        let (r, strat, means, nominal) = small_problem();
        let n = AllocationVector::integer(&[3, 5]).unwrap();
        let set = AmbiguitySet::wasserstein1(nominal, 0.3).unwrap();
        let coarse = brute_force_inner(&n, &set, &r, &strat, &means, 10).unwrap().0;
        let (refined, p) = brute_force_inner_refined(&n, &set, &r, &strat, &means, 10, 2).unwrap();
        assert!(refined >= coarse);
        assert!(set.contains(&p, 1e-9).unwrap());
        let solved = maximize_over_set(&n, &set, &r, &strat, &means, &InnerConfig::default()).unwrap().value;
        assert!((solved - refined).abs() <= 1e-3 * refined, "{solved} vs {refined}");
    }
}
