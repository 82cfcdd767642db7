//! Browser bindings. Every export takes plain numbers/strings and returns a
//! JSON string; failures come back as `{"error": "..."}` so the page never
//! has to catch a JS exception. The same functions run natively, which is
//! how they are tested.

use hympc::model::{check_s_stationarity, PrimalDualPoint};
use hympc::mpc::{closed_loop, ClosedLoopOptions, FrictionDemo, Scenario, Scheme};
use hympc::pathfollow::{follow, scalar_sequence, FollowOptions};
use hympc::registry;
use hympc::solver::{solve_mpcc, SqpccOptions};
use nalgebra::DVector;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Most grid points a path request may ask for.
const MAX_POINTS: usize = 2001;

fn finish(r: Result<Value, String>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn scalar_example(name: &str) -> Result<registry::Example, String> {
    let ex = registry::get(name).ok_or_else(|| format!("unknown problem `{name}`"))?;
    if ex.problem.n_x() != 1 {
        return Err(format!("`{name}` does not have a scalar parameter"));
    }
    Ok(ex)
}

/// Names and descriptions of the scalar-parameter problems.
#[wasm_bindgen]
pub fn problems() -> String {
    let list: Vec<Value> = registry::NAMES
        .iter()
        .filter_map(|n| registry::get(n))
        .filter(|ex| ex.problem.n_x() == 1)
        .map(|ex| json!({"name": ex.name, "description": ex.description, "domain": [ex.domain.0, ex.domain.1]}))
        .collect();
    Value::Array(list).to_string()
}

/// Solve a built-in problem at parameter `x` from `w = w0` (missing entries zero).
#[wasm_bindgen]
pub fn solve(name: &str, x: f64, w0: Vec<f64>) -> String {
    finish((|| {
        let ex = scalar_example(name)?;
        let prob = &ex.problem;
        if w0.len() > prob.n() {
            return Err(format!(
                "start has {} entries, the problem has {}",
                w0.len(),
                prob.n()
            ));
        }
        let mut w = DVector::zeros(prob.n());
        w.rows_mut(0, w0.len()).copy_from_slice(&w0);
        let xv = DVector::from_element(1, x);
        let z0 = PrimalDualPoint::from_primal(prob, w);
        let (z, st) =
            solve_mpcc(prob, &xv, &z0, &SqpccOptions::default()).map_err(|e| e.to_string())?;
        let rep = check_s_stationarity(prob, &z, &xv, 1e-6).map_err(|e| e.to_string())?;
        Ok(json!({
            "w": vec_of(&z.w),
            "xi": vec_of(&z.xi),
            "nu": vec_of(&z.nu),
            "objective": prob.objective(&z.w, &xv).map_err(|e| e.to_string())?,
            "iterations": st.iterations,
            "class": rep.class,
            "partition": rep.partition.signature(),
            "reference": ex.reference.map(|f| vec_of(&f(x).w)),
        }))
    })())
}

/// Track the solution map of a built-in problem from `a` to `b` with
/// `inner` QPCC steps per grid point, next to the converged map.
#[wasm_bindgen]
pub fn path(name: &str, a: f64, b: f64, dx: f64, inner: usize) -> String {
    finish((|| {
        let ex = scalar_example(name)?;
        if !(a.is_finite() && b.is_finite() && dx.is_finite() && dx > 0.0) {
            return Err("range must be finite with dx > 0".into());
        }
        if ((b - a) / dx).abs() + 1.0 > MAX_POINTS as f64 {
            return Err(format!("at most {MAX_POINTS} grid points"));
        }
        let prob = &ex.problem;
        let xs = scalar_sequence(a, b, dx);
        let x0 = &xs[0];
        let z0 = match ex.reference {
            Some(f) => f(x0[0]),
            None => {
                let z = PrimalDualPoint::zeros(prob);
                solve_mpcc(prob, x0, &z, &SqpccOptions::default())
                    .map_err(|e| e.to_string())?
                    .0
            }
        };
        let opts = FollowOptions {
            inner_iters: inner.max(1),
            ..FollowOptions::default()
        };
        let tr = follow(prob, &xs, &z0, &opts).map_err(|e| e.to_string())?;
        let s = tr.summary();
        let col = |pts: &[PrimalDualPoint]| -> Vec<Vec<f64>> {
            pts.iter().map(|z| vec_of(&z.w)).collect()
        };
        let at = |ks: &[usize]| -> Vec<f64> { ks.iter().map(|&k| tr.xs[k][0]).collect() };
        Ok(json!({
            "x": tr.xs.iter().map(|x| x[0]).collect::<Vec<_>>(),
            "tracked": col(&tr.iterates),
            "oracle": col(&tr.references),
            "tracking_error": tr.errors.iter().map(|e| if e.is_finite() { json!(e) } else { Value::Null }).collect::<Vec<_>>(),
            "partition": tr.partitions,
            "jumps": at(&s.jumps),
            "kinks": at(&s.kinks),
            "max_error": s.max_error,
            "truncated": s.truncated,
        }))
    })())
}

/// Closed-loop stick-slip demo with the default controller. `scheme` is one
/// of hyrti, hyasc, hyasrti, converged, smoothed; `kick` is the velocity
/// disturbance applied at 70% of the run.
#[wasm_bindgen]
pub fn mpc(scheme: &str, t_sim: f64, target: f64, kick: f64) -> String {
    finish((|| {
        if !(t_sim > 0.0 && t_sim <= 30.0) {
            return Err("simulation length must be in (0, 30]".into());
        }
        if !(target.is_finite() && kick.is_finite()) {
            return Err("target and kick must be finite".into());
        }
        let scheme = Scheme::parse(scheme, 2, 0.1).map_err(|e| e.to_string())?;
        let demo = FrictionDemo::default();
        let t_kick = (0.7 * t_sim / demo.dt).round() * demo.dt;
        let scenario = Scenario {
            t_sim,
            dt: demo.dt,
            reference: vec![(0.0, vec![0.0]), (0.5, vec![target])],
            disturbances: if kick != 0.0 {
                vec![(t_kick, vec![0.0, kick])]
            } else {
                Vec::new()
            },
            x0: Some(vec![0.0, 0.0]),
            plant_substeps: 8,
        };
        let tr = closed_loop(
            scheme,
            &demo,
            &scenario,
            &ClosedLoopOptions {
                oracle_error: false,
            },
        )
        .map_err(|e| e.to_string())?;
        let reference: Vec<f64> = tr
            .rows
            .iter()
            .map(|r| scenario.reference_at(r.t).map(|v| v[0]).unwrap_or(f64::NAN))
            .collect();
        Ok(json!({
            "scheme": tr.scheme,
            "t": tr.rows.iter().map(|r| r.t).collect::<Vec<_>>(),
            "position": tr.rows.iter().map(|r| r.x[0]).collect::<Vec<_>>(),
            "velocity": tr.rows.iter().map(|r| r.x[1]).collect::<Vec<_>>(),
            "belt": tr.rows.iter().map(|r| r.u[0]).collect::<Vec<_>>(),
            "reference": reference,
            "switches": tr.rows.iter().map(|r| r.branch_changes).collect::<Vec<_>>(),
            "branch_changes": tr.total_branch_changes(),
            "tracking_cost": tr.tracking_cost,
            "stopped": tr.error,
        }))
    })())
}
