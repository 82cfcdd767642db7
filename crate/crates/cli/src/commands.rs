use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use hympc::model::{check_s_stationarity, MpccProblem, PrimalDualPoint, StationarityReport};
use hympc::mpc::{closed_loop, ClosedLoopOptions, ClosedLoopTrace, FrictionDemo, Scenario, Scheme};
use hympc::pathfollow::{
    follow as follow_path, predictor_comparison, predictor_error_fit, scalar_sequence,
    FollowOptions,
};
use hympc::qpcc::HessianMode;
use hympc::registry;
use hympc::sensitivity::{detect_jump, directional_derivative, JumpOptions};
use hympc::solver::{
    kkt_residual, scholtes_solve, solve_mpcc, sqpcc_solve, ScholtesOptions, SolveStats,
    SqpccOptions,
};
use hympc::Error;
use nalgebra::DVector;
use serde::Serialize;
use serde_json::{json, Value};

use crate::SolveFlags;

#[derive(Debug)]
pub enum CliError {
    Parse(String),
    Solve(String),
    Infeasible(String),
    Io(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Parse(_) => 2,
            CliError::Solve(_) => 3,
            CliError::Infeasible(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Parse(s) | CliError::Solve(s) | CliError::Infeasible(s) | CliError::Io(s) => {
                f.write_str(s)
            }
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Parse(_) | Error::Expr(_) | Error::Problem(_) | Error::Dimension { .. } => {
                CliError::Parse(msg)
            }
            Error::Infeasible { .. } | Error::SubproblemInfeasible(_) => CliError::Infeasible(msg),
            _ => CliError::Solve(msg),
        }
    }
}

type Res<T> = std::result::Result<T, CliError>;

/// Stationarity tolerance for reports on converged points.
const REPORT_TOL: f64 = 1e-6;

struct Loaded {
    name: String,
    problem: MpccProblem,
}

fn load_problem(name_or_path: &str) -> Res<Loaded> {
    if let Some(ex) = registry::get(name_or_path) {
        return Ok(Loaded {
            name: ex.name.to_string(),
            problem: ex.problem,
        });
    }
    let path = Path::new(name_or_path);
    if !path.exists() {
        return Err(CliError::Parse(format!(
            "`{name_or_path}` is neither a built-in problem ({}) nor a file",
            registry::NAMES.join(", ")
        )));
    }
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Parse(format!("{name_or_path}: {e}")))?;
    let v: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{name_or_path}: {e}")))?;
    let problem = MpccProblem::from_json(&v)?;
    Ok(Loaded {
        name: problem.name.clone(),
        problem,
    })
}

/// Numbers separated by commas or spaces, optionally in brackets.
pub fn parse_vec(s: &str) -> Res<Vec<f64>> {
    let inner = s
        .trim()
        .trim_start_matches(['(', '['])
        .trim_end_matches([')', ']']);
    inner
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| CliError::Parse(format!("bad number `{t}` in `{s}`")))
        })
        .collect()
}

fn parse_param(prob: &MpccProblem, s: &str) -> Res<DVector<f64>> {
    let v = parse_vec(s)?;
    if v.len() != prob.n_x() {
        return Err(CliError::Parse(format!(
            "parameter `{s}` has {} entries, the problem has {}",
            v.len(),
            prob.n_x()
        )));
    }
    Ok(DVector::from_vec(v))
}

fn start_point(prob: &MpccProblem, flags: &SolveFlags) -> Res<PrimalDualPoint> {
    let mut w = DVector::zeros(prob.n());
    if let Some(s) = &flags.z0 {
        let v = parse_vec(s)?;
        if v.len() > prob.n() {
            return Err(CliError::Parse(format!(
                "--z0 has {} entries, the problem has {}",
                v.len(),
                prob.n()
            )));
        }
        w.rows_mut(0, v.len()).copy_from_slice(&v);
    }
    Ok(PrimalDualPoint::from_primal(prob, w))
}

fn sqpcc_options(flags: &SolveFlags) -> Res<SqpccOptions> {
    let hessian: HessianMode = flags.hessian.parse()?;
    Ok(SqpccOptions {
        hessian,
        ..SqpccOptions::default()
    })
}

#[derive(Serialize)]
struct SolveSummary {
    status: String,
    iterations: usize,
    kkt_residuals: Vec<f64>,
    step_norms: Vec<f64>,
    qpcc_pivots: Vec<usize>,
    branches: Vec<String>,
}

impl SolveSummary {
    fn from_stats(st: &SolveStats) -> Self {
        SolveSummary {
            status: serde_json::to_value(st.status)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            iterations: st.iterations,
            kkt_residuals: st.kkt_residuals.clone(),
            step_norms: st.step_norms.clone(),
            qpcc_pivots: st.qpcc_pivots.clone(),
            branches: st.branches.clone(),
        }
    }
}

struct Solved {
    z: PrimalDualPoint,
    stats: Option<SolveSummary>,
    smoothing_stages: usize,
}

fn run_solver(prob: &MpccProblem, x: &DVector<f64>, flags: &SolveFlags) -> Res<Solved> {
    let z0 = start_point(prob, flags)?;
    let opts = sqpcc_options(flags)?;
    match flags.solver.as_str() {
        "auto" => {
            let (z, st) = solve_mpcc(prob, x, &z0, &opts)?;
            Ok(Solved {
                z,
                stats: Some(SolveSummary::from_stats(&st)),
                smoothing_stages: 0,
            })
        }
        "sqpcc" => {
            let (z, st) = sqpcc_solve(prob, x, &z0, &opts)?;
            Ok(Solved {
                z,
                stats: Some(SolveSummary::from_stats(&st)),
                smoothing_stages: 0,
            })
        }
        "scholtes" => {
            let (zs, sst) = scholtes_solve(prob, x, &z0, &ScholtesOptions::default())?;
            // polish the smoothed point onto the complementarity set
            let (z, st) = sqpcc_solve(prob, x, &zs, &opts)?;
            Ok(Solved {
                z,
                stats: Some(SolveSummary::from_stats(&st)),
                smoothing_stages: sst.taus.len(),
            })
        }
        other => Err(CliError::Parse(format!(
            "unknown solver `{other}` (auto, sqpcc, scholtes)"
        ))),
    }
}

fn write_file(dir: &Path, name: &str, content: &str) -> Res<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let p = dir.join(name);
    fs::write(&p, content).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
    Ok(p)
}

fn emit(report: &Value, out: Option<&Path>, file: &str) -> Res<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    println!("{text}");
    if let Some(dir) = out {
        write_file(dir, file, &(text + "\n"))?;
    }
    Ok(())
}

fn slice(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

pub fn list() -> Res<()> {
    for name in registry::NAMES {
        let ex = registry::get(name).expect("registered");
        println!(
            "{name:14} n={:<3} n_x={} m={:<3} {}",
            ex.problem.n(),
            ex.problem.n_x(),
            ex.problem.m(),
            ex.description
        );
    }
    Ok(())
}

pub fn export(problem: &str) -> Res<()> {
    let p = load_problem(problem)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&p.problem.to_json()).expect("serializes")
    );
    Ok(())
}

fn point_json(prob: &MpccProblem, z: &PrimalDualPoint, x: &DVector<f64>) -> Res<Value> {
    let stationarity: Option<StationarityReport> =
        check_s_stationarity(prob, z, x, REPORT_TOL).ok();
    Ok(json!({
        "objective": prob.objective(&z.w, x)?,
        "w": slice(&z.w),
        "lambda": slice(&z.lambda),
        "mu": slice(&z.mu),
        "xi": slice(&z.xi),
        "nu": slice(&z.nu),
        "kkt_residual": kkt_residual(prob, z, x)?,
        "stationarity": stationarity,
    }))
}

pub fn solve(problem: &str, x: &str, flags: &SolveFlags, out: Option<&Path>) -> Res<()> {
    let p = load_problem(problem)?;
    let xv = parse_param(&p.problem, x)?;
    let s = run_solver(&p.problem, &xv, flags)?;
    let mut report = point_json(&p.problem, &s.z, &xv)?;
    report["problem"] = json!(p.name);
    report["x"] = json!(slice(&xv));
    report["solver"] = json!(flags.solver);
    report["stats"] = json!(s.stats);
    if s.smoothing_stages > 0 {
        report["smoothing_stages"] = json!(s.smoothing_stages);
    }
    emit(&report, out, "solve.json")
}

fn scalar_problem(p: &Loaded, cmd: &str) -> Res<()> {
    if p.problem.n_x() != 1 {
        return Err(CliError::Parse(format!(
            "{cmd} needs a scalar parameter; `{}` has {}",
            p.name,
            p.problem.n_x()
        )));
    }
    Ok(())
}

fn check_range(a: f64, b: f64, dx: f64) -> Res<()> {
    if !(a.is_finite() && b.is_finite() && dx.is_finite() && dx > 0.0) {
        return Err(CliError::Parse("range must be finite with dx > 0".into()));
    }
    Ok(())
}

pub fn follow(
    problem: &str,
    x_start: f64,
    x_end: f64,
    dx: f64,
    inner_iters: usize,
    flags: &SolveFlags,
    out: &Path,
) -> Res<()> {
    let p = load_problem(problem)?;
    scalar_problem(&p, "follow")?;
    check_range(x_start, x_end, dx)?;
    let xs = scalar_sequence(x_start, x_end, dx);
    let z0 = run_solver(&p.problem, &xs[0], flags)?.z;
    let opts = FollowOptions {
        inner_iters,
        hessian: flags.hessian.parse()?,
        oracle: sqpcc_options(flags)?,
        ..FollowOptions::default()
    };
    let trace = follow_path(&p.problem, &xs, &z0, &opts)?;
    let csv = write_file(out, &format!("follow_{}.csv", p.name), &trace.to_csv())?;
    let sum = trace.summary();
    let at = |ks: &[usize]| -> Vec<Value> {
        ks.iter()
            .map(|&k| json!({"k": k, "x": trace.xs[k][0]}))
            .collect()
    };
    let report = json!({
        "problem": p.name,
        "csv": csv,
        "steps": sum.steps,
        "max_error": sum.max_error,
        "max_tracking_error": trace.max_tracking_error(),
        "jumps": at(&sum.jumps),
        "kinks": at(&sum.kinks),
        "tracking_jumps": at(&sum.tracking_jumps),
        "truncated": sum.truncated,
    });
    emit(&report, Some(out), &format!("follow_{}.json", p.name))?;
    if sum.truncated {
        return Err(CliError::Infeasible(
            "tracking QPCC failed; trace truncated".into(),
        ));
    }
    Ok(())
}

pub fn predict(
    problem: &str,
    x_bar: f64,
    x_start: f64,
    x_end: f64,
    dx: f64,
    flags: &SolveFlags,
    out: &Path,
) -> Res<()> {
    let p = load_problem(problem)?;
    scalar_problem(&p, "predict")?;
    check_range(x_start, x_end, dx)?;
    let xb = DVector::from_element(1, x_bar);
    let z_bar = run_solver(&p.problem, &xb, flags)?.z;
    let grid = scalar_sequence(x_start, x_end, dx);
    let opts = FollowOptions {
        hessian: flags.hessian.parse()?,
        oracle: sqpcc_options(flags)?,
        ..FollowOptions::default()
    };
    let rows = predictor_comparison(&p.problem, &z_bar, &xb, &grid, &opts)?;
    let f = |v: Option<f64>| v.map_or("nan".to_string(), |e| format!("{e:.16e}"));
    let mut csv =
        String::from("x,qpcc_error,qp_error,qp_qpcc_gap,qpcc_branch,branch_qp_feasible\n");
    for r in &rows {
        csv.push_str(&format!(
            "{:.16e},{},{},{},{},{}\n",
            r.x[0],
            f(r.qpcc_error()),
            f(r.qp_error()),
            f(r.qp_qpcc_gap()),
            r.qpcc_branch,
            r.branch_qp.is_some()
        ));
    }
    let path = write_file(out, &format!("predict_{}.csv", p.name), &csv)?;
    // quadratic + cubic fit of the QPCC error where the branch QP still works
    let (mut dxs, mut errs) = (Vec::new(), Vec::new());
    for r in &rows {
        if let (Some(e), true) = (r.qpcc_error(), r.branch_qp.is_some()) {
            if r.x[0] != x_bar {
                dxs.push(r.x[0] - x_bar);
                errs.push(e);
            }
        }
    }
    let fit = (dxs.len() >= 3).then(|| {
        let (c2, c3, r2) = predictor_error_fit(&dxs, &errs);
        json!({"c2": c2, "c3": c3, "r2": r2, "points": dxs.len()})
    });
    let qp_infeasible: Vec<f64> = rows
        .iter()
        .filter(|r| r.branch_qp.is_none())
        .map(|r| r.x[0])
        .collect();
    let report = json!({
        "problem": p.name,
        "x_bar": x_bar,
        "csv": path,
        "points": rows.len(),
        "branch_qp_infeasible_at": qp_infeasible,
        "qpcc_failed_at": rows.iter().filter(|r| r.qpcc.is_none()).map(|r| r.x[0]).collect::<Vec<_>>(),
        "error_fit": fit,
    });
    emit(&report, Some(out), &format!("predict_{}.json", p.name))
}

pub fn jump(
    problem: &str,
    x_a: &str,
    x_b: &str,
    grid: usize,
    flags: &SolveFlags,
    out: Option<&Path>,
) -> Res<()> {
    let p = load_problem(problem)?;
    let xa = parse_param(&p.problem, x_a)?;
    let xb = parse_param(&p.problem, x_b)?;
    if grid == 0 {
        return Err(CliError::Parse("--grid must be positive".into()));
    }
    let z_a = run_solver(&p.problem, &xa, flags)?.z;
    let opts = JumpOptions {
        grid,
        sqpcc: sqpcc_options(flags)?,
        ..JumpOptions::default()
    };
    let rep = detect_jump(&p.problem, &xa, &xb, &z_a, &opts)?;
    let at = |t: f64| slice(&(&xa + (&xb - &xa) * t));
    let mut v = serde_json::to_value(&rep).expect("serializes");
    v["problem"] = json!(p.name);
    v["x_s"] = json!(rep.tau_s.map(at));
    v["kink_x"] = json!(rep.kinks.iter().map(|k| at(k.tau)).collect::<Vec<_>>());
    emit(&v, out, "jump.json")
}

pub fn deriv(
    problem: &str,
    x: &str,
    v: &str,
    tau: Option<f64>,
    flags: &SolveFlags,
    out: Option<&Path>,
) -> Res<()> {
    let p = load_problem(problem)?;
    let xv = parse_param(&p.problem, x)?;
    let vv = parse_param(&p.problem, v)?;
    let z = run_solver(&p.problem, &xv, flags)?.z;
    let d = directional_derivative(&p.problem, &z, &xv, &vv, tau)?;
    let mut rep = serde_json::to_value(&d).expect("serializes");
    rep["problem"] = json!(p.name);
    rep["x"] = json!(slice(&xv));
    rep["w"] = json!(slice(&z.w));
    emit(&rep, out, "deriv.json")
}

/// Scenario file: the scenario fields plus an optional `controller` object
/// overriding the friction demo settings.
fn load_scenario(path: &Path) -> Res<(Scenario, FrictionDemo)> {
    let name = path.display();
    let text = fs::read_to_string(path).map_err(|e| CliError::Parse(format!("{name}: {e}")))?;
    let v: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{name}: {e}")))?;
    let scenario: Scenario =
        serde_json::from_value(v.clone()).map_err(|e| CliError::Parse(format!("{name}: {e}")))?;
    let ctrl = v.get("controller").cloned().unwrap_or_else(|| json!({}));
    let has_dt = ctrl.get("dt").is_some();
    let mut demo: FrictionDemo = serde_json::from_value(ctrl)
        .map_err(|e| CliError::Parse(format!("{name}: controller: {e}")))?;
    if !has_dt {
        demo.dt = scenario.dt;
    }
    Ok((scenario, demo))
}

#[derive(Serialize)]
struct RunSummary {
    scheme: String,
    tracking_cost: f64,
    max_feedback_ms: f64,
    mean_feedback_ms: f64,
    branch_changes: usize,
    max_qpcc_per_sample: u64,
    fallbacks: usize,
    max_error_vs_oracle: Option<f64>,
    samples: usize,
    error: Option<String>,
    csv: PathBuf,
}

pub fn mpc(
    scenario_path: &Path,
    schemes: &str,
    n_as: usize,
    tau: f64,
    oracle: bool,
    jobs: usize,
    out: &Path,
) -> Res<()> {
    let (scenario, demo) = load_scenario(scenario_path)?;
    let mut list = Vec::new();
    for s in schemes.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        list.push(Scheme::parse(s, n_as, tau)?);
    }
    if oracle && !list.contains(&Scheme::Converged) {
        list.push(Scheme::Converged);
    }
    if list.is_empty() {
        return Err(CliError::Parse("no scheme given".into()));
    }
    let opts = ClosedLoopOptions {
        oracle_error: oracle,
    };
    let run = |s: Scheme| closed_loop(s, &demo, &scenario, &opts);
    let results: Vec<hympc::Result<ClosedLoopTrace>> = if jobs <= 1 {
        list.iter().map(|&s| run(s)).collect()
    } else {
        let mut slots: Vec<Option<hympc::Result<ClosedLoopTrace>>> =
            (0..list.len()).map(|_| None).collect();
        for (chunk_s, chunk_r) in list.chunks(jobs).zip(slots.chunks_mut(jobs)) {
            std::thread::scope(|sc| {
                let handles: Vec<_> = chunk_s.iter().map(|&s| sc.spawn(move || run(s))).collect();
                for (h, slot) in handles.into_iter().zip(chunk_r.iter_mut()) {
                    *slot = Some(h.join().expect("closed-loop run panicked"));
                }
            });
        }
        slots
            .into_iter()
            .map(|r| r.expect("every run finished"))
            .collect()
    };
    let mut summaries = Vec::new();
    for r in results {
        let trace = r?;
        let csv = write_file(out, &format!("mpc_{}.csv", trace.scheme), &trace.to_csv())?;
        let n = trace.rows.len();
        summaries.push(RunSummary {
            scheme: trace.scheme.clone(),
            tracking_cost: trace.tracking_cost,
            max_feedback_ms: trace.max_feedback_ms(),
            mean_feedback_ms: trace.rows.iter().map(|r| r.t_fb_ms).sum::<f64>() / n.max(1) as f64,
            branch_changes: trace.total_branch_changes(),
            max_qpcc_per_sample: trace.rows.iter().map(|r| r.qpcc_solves).max().unwrap_or(0),
            fallbacks: trace.rows.iter().filter(|r| r.fallback).count(),
            max_error_vs_oracle: oracle.then(|| trace.max_error()),
            samples: n,
            error: trace.error.clone(),
            csv,
        });
    }
    let mut report = json!({ "scenario": scenario_path, "runs": &summaries });
    if oracle {
        let full = summaries
            .iter()
            .find(|s| s.scheme == Scheme::Converged.label())
            .map(|s| (s.max_feedback_ms, s.tracking_cost, s.mean_feedback_ms))
            .expect("oracle run present");
        let mut pareto =
            String::from("scheme,max_feedback_ms,mean_feedback_ms,tracking_cost,relative_cost,below_full_solve\n");
        let mut rows = Vec::new();
        for s in &summaries {
            let below = s.max_feedback_ms < full.0;
            pareto.push_str(&format!(
                "{},{:.6},{:.6},{:.16e},{:.16e},{}\n",
                s.scheme,
                s.max_feedback_ms,
                s.mean_feedback_ms,
                s.tracking_cost,
                s.tracking_cost / full.1,
                below
            ));
            rows.push(json!({
                "scheme": s.scheme,
                "max_feedback_ms": s.max_feedback_ms,
                "mean_feedback_ms": s.mean_feedback_ms,
                "tracking_cost": s.tracking_cost,
                "relative_cost": s.tracking_cost / full.1,
                "feedback_below_full_solve": below,
            }));
        }
        let path = write_file(out, "pareto.csv", &pareto)?;
        report["pareto"] = json!({
            "full_solve_max_ms": full.0,
            "full_solve_mean_ms": full.2,
            "csv": path,
            "rows": rows,
        });
    }
    emit(&report, Some(out), "mpc_summary.json")?;
    if let Some(s) = summaries.iter().find(|s| s.error.is_some()) {
        return Err(CliError::Solve(format!(
            "{}: {}",
            s.scheme,
            s.error.as_deref().unwrap_or("")
        )));
    }
    Ok(())
}
