//! The four subcommands. Each returns its files in memory; nothing touches
//! the output directory until the whole command has succeeded.

use std::path::Path;

use drstrat_core::bo::{solve_dr_strat, solve_str_m, Method, SolveReport, TraceRow};
use drstrat_core::dist::Pmf;
use drstrat_core::estimators::{true_mean, AllocationVector};
use drstrat_core::inner::{InnerResult, InnerSolver};
use drstrat_core::sim::replicate_experiment;
use serde::Serialize;

use crate::config::Experiment;
use crate::error::CliError;
use crate::output::{header, Outputs};

fn num(v: f64) -> String {
    v.to_string()
}

/// Allocation from a file: a JSON array, a JSON object with
/// `best_allocation` (a solve report), or a CSV with an `n_k` column.
pub fn read_allocation(path: &Path, exp: &Experiment) -> Result<Vec<u64>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read allocation file {}: {e}", path.display())))?;
    let bad = |line: usize, message: String| CliError::Config { file: Some(path.display().to_string()), line, message };
    let counts: Vec<u64> = if text.trim_start().starts_with(['[', '{']) {
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.line(), e.to_string()))?;
        let array = value.get("best_allocation").unwrap_or(&value);
        serde_json::from_value(array.clone()).map_err(|e| bad(1, format!("expected an array of counts: {e}")))?
    } else {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| bad(1, e.to_string()))?.clone();
        let column = headers.iter().position(|h| h == "n_k").ok_or_else(|| bad(1, "no n_k column".into()))?;
        let mut counts = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record.map_err(|e| bad(i + 2, e.to_string()))?;
            let n = record.get(column).unwrap_or("").trim().parse().map_err(|e| bad(i + 2, format!("n_k: {e}")))?;
            counts.push(n);
        }
        counts
    };
    let k = exp.problem.num_strata();
    if counts.len() != k {
        return Err(bad(1, format!("allocation has {} entries for {k} strata", counts.len())));
    }
    if counts.contains(&0) {
        return Err(bad(1, "every stratum needs at least one sample".into()));
    }
    let total: u64 = counts.iter().sum();
    if total != exp.problem.budget {
        return Err(bad(1, format!("allocation sums to {total}, budget is {}", exp.problem.budget)));
    }
    Ok(counts)
}

fn solver(exp: &Experiment) -> Result<InnerSolver, CliError> {
    Ok(exp.problem.inner_solver(exp.inner)?)
}

fn allocation_rows(exp: &Experiment, counts: &[u64]) -> Vec<Vec<String>> {
    let omega = drstrat_core::dist::stratum_masses(exp.problem.reference.mass(), &exp.problem.strat);
    counts
        .iter()
        .enumerate()
        .map(|(k, &n)| vec![k.to_string(), n.to_string(), num(n as f64 / exp.problem.budget as f64), num(omega[k])])
        .collect()
}

fn trace_table(trace: &[TraceRow], strata: usize) -> (Vec<String>, Vec<Vec<String>>) {
    let mut head = header(&["iteration", "phase", "value", "best_so_far"]);
    head.extend((0..strata).map(|k| format!("n_{k}")));
    let rows = trace
        .iter()
        .map(|r| {
            let mut row = vec![r.iteration.to_string(), r.phase.to_string(), num(r.value), num(r.best_so_far)];
            row.extend(r.allocation.iter().map(|&v| num(v)));
            row
        })
        .collect();
    (head, rows)
}

/// `index, x, <name>...` table of pmfs on the problem grid.
fn pmf_table(exp: &Experiment, columns: &[(String, &Pmf)]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut head = header(&["index", "x"]);
    head.extend(columns.iter().map(|(n, _)| n.clone()));
    let rows = exp
        .problem
        .grid
        .points()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let mut row = vec![i.to_string(), num(x)];
            row.extend(columns.iter().map(|(_, p)| num(p.mass()[i])));
            row
        })
        .collect();
    (head, rows)
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    seed: u64,
    #[serde(flatten)]
    report: &'a SolveReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    str_m_allocation: Option<&'a [u64]>,
}

/// Runs Str-M, and for DR-Str also the robust solve seeded with the Str-M
/// allocation. Returns `(str_m, dr_str)`.
fn run_solvers(
    exp: &Experiment,
    solver: &InnerSolver,
    robust: bool,
) -> Result<(SolveReport, Option<SolveReport>), CliError> {
    let budget = exp.problem.budget;
    let str_m = solve_str_m(solver, budget, &exp.bo)?;
    let dr = if robust { Some(solve_dr_strat(solver, budget, &exp.bo, Some(&str_m.best_allocation))?) } else { None };
    Ok((str_m, dr))
}

pub fn solve(exp: &Experiment, method: Method) -> Result<Outputs, CliError> {
    let solver = solver(exp)?;
    let (str_m, dr) = run_solvers(exp, &solver, method == Method::DrStr)?;
    let report = dr.as_ref().unwrap_or(&str_m);
    let mut out = Outputs::default();
    out.add_json(
        "report.json",
        &SolveOutput {
            seed: exp.seed,
            report,
            str_m_allocation: dr.as_ref().map(|_| str_m.best_allocation.as_slice()),
        },
    )?;
    out.add_csv(
        "allocation.csv",
        &header(&["stratum", "n_k", "fraction", "omega_ref"]),
        &allocation_rows(exp, &report.best_allocation),
    )?;
    let (head, rows) = trace_table(&report.trace, exp.problem.num_strata());
    out.add_csv("trace.csv", &head, &rows)?;
    for (m, (set, witness)) in solver.sets().iter().zip(&report.witnesses).enumerate() {
        let (head, rows) = pmf_table(exp, &[("nominal".into(), set.nominal()), ("witness".into(), witness)]);
        out.add_csv(&format!("witness_model_{m}.csv"), &head, &rows)?;
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct Evaluation {
    allocation: Vec<u64>,
    nominal_variances: Vec<f64>,
    worst_case_variances: Vec<f64>,
    max_nominal: f64,
    max_worst_case: f64,
    argmax_model: usize,
}

fn evaluate_allocation(solver: &InnerSolver, counts: &[u64]) -> Result<(Evaluation, InnerResult), CliError> {
    let n = AllocationVector::integer(counts)?;
    let result = solver.evaluate(&n)?;
    let nominal_variances = solver
        .sets()
        .iter()
        .map(|s| solver.model().variance(n.budgets(), s.nominal().mass()))
        .collect::<drstrat_core::Result<Vec<_>>>()?;
    let eval = Evaluation {
        allocation: counts.to_vec(),
        max_nominal: nominal_variances.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        nominal_variances,
        worst_case_variances: result.per_model_values.clone(),
        max_worst_case: result.value,
        argmax_model: result.argmax_model,
    };
    Ok((eval, result))
}

fn add_evaluation(
    out: &mut Outputs,
    exp: &Experiment,
    solver: &InnerSolver,
    prefix: &str,
    eval: &Evaluation,
    result: &InnerResult,
) -> Result<(), CliError> {
    let file = |m: usize| format!("{prefix}worst_case_model_{m}.csv");
    let mut rows: Vec<Vec<String>> = (0..eval.nominal_variances.len())
        .map(|m| vec![m.to_string(), num(eval.nominal_variances[m]), num(eval.worst_case_variances[m]), file(m)])
        .collect();
    rows.push(vec!["max".into(), num(eval.max_nominal), num(eval.max_worst_case), file(eval.argmax_model)]);
    out.add_csv(
        &format!("{prefix}evaluation.csv"),
        &header(&["model", "nominal_variance", "worst_case_variance", "worst_case_pmf_file"]),
        &rows,
    )?;
    for (m, set) in solver.sets().iter().enumerate() {
        let (head, rows) =
            pmf_table(exp, &[("nominal".into(), set.nominal()), ("worst_case".into(), &result.per_model_pmfs[m])]);
        out.add_csv(&file(m), &head, &rows)?;
    }
    Ok(())
}

pub fn evaluate(exp: &Experiment, counts: &[u64]) -> Result<Outputs, CliError> {
    let solver = solver(exp)?;
    let (eval, result) = evaluate_allocation(&solver, counts)?;
    let mut out = Outputs::default();
    add_evaluation(&mut out, exp, &solver, "", &eval, &result)?;
    out.add_json("evaluation.json", &eval)?;
    Ok(out)
}

#[derive(Serialize)]
struct ReplicationRow {
    model: usize,
    eval: &'static str,
    true_mean: f64,
    empirical_mean: f64,
    std_error: f64,
    analytic_variance: f64,
    empirical_variance: f64,
    relative_error: f64,
}

/// Replicates the sampling experiment at `counts`, scoring every model under
/// its nominal pmf and its worst-case pmf at this allocation.
pub fn replicate(exp: &Experiment, counts: &[u64], replications: usize) -> Result<Outputs, CliError> {
    if replications < 2 {
        return Err(CliError::Usage(format!("--replications must be at least 2, got {replications}")));
    }
    let solver = solver(exp)?;
    let (_, worst) = evaluate_allocation(&solver, counts)?;
    let p = &exp.problem;
    let mut evals: Vec<(usize, &'static str, Pmf)> = Vec::new();
    for (m, set) in p.sets.iter().enumerate() {
        evals.push((m, "nominal", set.nominal().clone()));
        evals.push((m, "worst_case", worst.per_model_pmfs[m].clone()));
    }
    let pmfs: Vec<Pmf> = evals.iter().map(|(_, _, q)| q.clone()).collect();
    let result = replicate_experiment(&p.simulator, &p.reference, &p.strat, counts, &pmfs, replications, exp.seed)?;
    let n: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let rows = evals
        .iter()
        .zip(&result.per_model)
        .map(|((m, kind, q), stats)| {
            let analytic = solver.model().variance(&n, q.mass())?;
            Ok(ReplicationRow {
                model: *m,
                eval: kind,
                true_mean: true_mean(q, &p.means)?,
                empirical_mean: stats.mean,
                std_error: stats.std_error,
                analytic_variance: analytic,
                empirical_variance: stats.variance,
                relative_error: if analytic > 0.0 { (stats.variance - analytic).abs() / analytic } else { 0.0 },
            })
        })
        .collect::<drstrat_core::Result<Vec<_>>>()?;
    let mut out = Outputs::default();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.model.to_string(),
                r.eval.to_string(),
                num(r.true_mean),
                num(r.empirical_mean),
                num(r.std_error),
                num(r.analytic_variance),
                num(r.empirical_variance),
                num(r.relative_error),
            ]
        })
        .collect();
    out.add_csv(
        "replication.csv",
        &header(&[
            "model",
            "eval",
            "true_mean",
            "empirical_mean",
            "std_error",
            "analytic_variance",
            "empirical_variance",
            "relative_error",
        ]),
        &table,
    )?;
    out.add_json(
        "replication.json",
        &serde_json::json!({
            "allocation": counts,
            "replications": result.replications,
            "simulator_calls": result.simulator_calls,
            "seed": exp.seed,
            "rows": rows,
        }),
    )?;
    Ok(out)
}

#[derive(Serialize)]
struct MethodSummary<'a> {
    allocation: &'a [u64],
    objective: f64,
    #[serde(flatten)]
    evaluation: &'a Evaluation,
}

/// Solves with both methods, evaluates both allocations on the ambiguity
/// sets, and reports `max worst case (Str-M) / max worst case (DR-Str)`.
pub fn compare(exp: &Experiment) -> Result<Outputs, CliError> {
    let solver = solver(exp)?;
    let (str_m, dr) = run_solvers(exp, &solver, true)?;
    let dr = dr.expect("robust solve requested");
    let (eval_s, res_s) = evaluate_allocation(&solver, &str_m.best_allocation)?;
    let (eval_d, res_d) = evaluate_allocation(&solver, &dr.best_allocation)?;
    let ratio = eval_s.max_worst_case / eval_d.max_worst_case;
    let mut out = Outputs::default();
    out.add_json(
        "compare.json",
        &serde_json::json!({
            "seed": exp.seed,
            "budget": exp.problem.budget,
            "str_m": MethodSummary { allocation: &str_m.best_allocation, objective: str_m.best_value, evaluation: &eval_s },
            "dr_str": MethodSummary { allocation: &dr.best_allocation, objective: dr.best_value, evaluation: &eval_d },
            "ratio": ratio,
        }),
    )?;
    let bars: Vec<Vec<String>> = (0..exp.problem.num_strata())
        .map(|k| vec![k.to_string(), str_m.best_allocation[k].to_string(), dr.best_allocation[k].to_string()])
        .collect();
    out.add_csv("allocation_bars.csv", &header(&["stratum", "str_m", "dr_str"]), &bars)?;
    let mut columns: Vec<(String, &Pmf)> = Vec::new();
    for (m, set) in solver.sets().iter().enumerate() {
        columns.push((format!("nominal_{m}"), set.nominal()));
        columns.push((format!("str_m_worst_case_{m}"), &res_s.per_model_pmfs[m]));
        columns.push((format!("dr_str_worst_case_{m}"), &res_d.per_model_pmfs[m]));
    }
    let (head, rows) = pmf_table(exp, &columns);
    out.add_csv("worst_case_pmfs.csv", &head, &rows)?;
    for (name, report) in [("trace_str_m.csv", &str_m), ("trace_dr_str.csv", &dr)] {
        let (head, rows) = trace_table(&report.trace, exp.problem.num_strata());
        out.add_csv(name, &head, &rows)?;
    }
    add_evaluation(&mut out, exp, &solver, "str_m_", &eval_s, &res_s)?;
    add_evaluation(&mut out, exp, &solver, "dr_str_", &eval_d, &res_d)?;
    Ok(out)
}
