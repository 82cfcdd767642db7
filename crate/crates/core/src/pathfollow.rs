//! Path following with one QPCC per parameter value, and predictor
//! comparisons between the QPCC, a fixed-branch QP and full solves.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{IndexPartition, MpccProblem, PrimalDualPoint, TOL_ACT};
use crate::qpcc::{
    build_qpcc, default_branch, solve_qpcc, HessianMode, QpccBuildOptions, QpccOptions, QpccStatus,
};
use crate::solver::{solve_mpcc, SqpccOptions};

#[derive(Clone, Debug)]
pub struct FollowOptions {
    /// QPCC steps per parameter value; 1 is the plain tracking scheme.
    pub inner_iters: usize,
    pub hessian: HessianMode,
    pub eps_reg: f64,
    pub qpcc: QpccOptions,
    /// Settings of the full-solve oracle.
    pub oracle: SqpccOptions,
}

impl Default for FollowOptions {
    fn default() -> Self {
        FollowOptions {
            inner_iters: 1,
            hessian: HessianMode::Exact,
            eps_reg: 1e-8,
            qpcc: QpccOptions::default(),
            oracle: SqpccOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    /// Starting point, no QPCC solved.
    Start,
    Tracked,
    /// The QPCC failed; the trace ends here.
    Failed(QpccStatus),
    /// The oracle could not solve at this parameter.
    OracleFailed,
}

impl StepStatus {
    fn label(&self) -> String {
        match self {
            StepStatus::Start => "start".into(),
            StepStatus::Tracked => "tracked".into(),
            StepStatus::Failed(s) => format!("failed_{s:?}").to_lowercase(),
            StepStatus::OracleFailed => "oracle_failed".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PathTrace {
    pub xs: Vec<DVector<f64>>,
    pub iterates: Vec<PrimalDualPoint>,
    pub references: Vec<PrimalDualPoint>,
    /// Euclidean primal-dual distance to the oracle; NaN where it failed.
    pub errors: Vec<f64>,
    /// Partition signature of each iterate (`G`, `H`, `0` for degenerate).
    pub partitions: Vec<String>,
    /// Partition signature of each oracle point.
    pub reference_partitions: Vec<String>,
    pub statuses: Vec<StepStatus>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PathSummary {
    pub max_error: f64,
    /// Steps where the oracle solution map jumps: a pair flips between `G`
    /// and `H` together with a primal step at least ten times the median.
    /// Flips within three steps of each other count once.
    pub jumps: Vec<usize>,
    /// Steps where the oracle map changes branch continuously: a small flip,
    /// or a pair entering or leaving the degenerate set.
    pub kinks: Vec<usize>,
    /// Jumps of the tracking iterates, same rule.
    pub tracking_jumps: Vec<usize>,
    pub steps: usize,
    pub truncated: bool,
}

/// Jump and kink steps along a sequence of points with partition signatures.
fn events(points: &[PrimalDualPoint], parts: &[String]) -> (Vec<usize>, Vec<usize>) {
    let steps: Vec<f64> = points
        .windows(2)
        .map(|p| (&p[1].w - &p[0].w).norm())
        .collect();
    let mut sorted: Vec<f64> = steps.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = sorted.get(sorted.len() / 2).copied().unwrap_or(0.0);
    let mut jumps: Vec<usize> = Vec::new();
    let mut kinks: Vec<usize> = Vec::new();
    for k in 1..parts.len().min(points.len()) {
        let (a, b) = (parts[k - 1].as_bytes(), parts[k].as_bytes());
        let flip = a
            .iter()
            .zip(b)
            .any(|(p, q)| (*p == b'G' && *q == b'H') || (*p == b'H' && *q == b'G'));
        let deg = a.iter().zip(b).any(|(p, q)| (*p == b'D') != (*q == b'D'));
        if flip && steps[k - 1] > 0.0 && steps[k - 1] >= 10.0 * median {
            if !jumps.last().is_some_and(|&j| k <= j + 3) {
                jumps.push(k);
            }
        } else if flip || deg {
            // a pair leaving the degenerate set kinks at the last degenerate point
            let leaving = !flip && a.iter().zip(b).all(|(p, q)| *q != b'D' || *p == b'D');
            let at = if leaving { k - 1 } else { k };
            if !kinks.last().is_some_and(|&j| at <= j + 1) {
                kinks.push(at);
            }
        }
    }
    (jumps, kinks)
}

impl PathTrace {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn max_error(&self) -> f64 {
        self.errors
            .iter()
            .copied()
            .filter(|e| e.is_finite())
            .fold(0.0, f64::max)
    }

    /// True if the iterate and the oracle pin opposite sides of some pair,
    /// i.e. they sit on different pieces of the solution map.
    pub fn branch_mismatch(&self, k: usize) -> bool {
        let (a, b) = (
            self.partitions[k].as_bytes(),
            self.reference_partitions[k].as_bytes(),
        );
        a.iter()
            .zip(b)
            .any(|(p, q)| (*p == b'G' && *q == b'H') || (*p == b'H' && *q == b'G'))
    }

    /// Largest error over steps where iterate and oracle share a branch.
    /// Around a jump the error is the jump size itself for at least one step
    /// whatever the parameter increment; this excludes those steps.
    pub fn max_tracking_error(&self) -> f64 {
        (0..self.len())
            .filter(|&k| !self.branch_mismatch(k) && self.errors[k].is_finite())
            .map(|k| self.errors[k])
            .fold(0.0, f64::max)
    }

    /// First and last step where iterate and oracle are on different branches.
    pub fn mismatch_window(&self) -> Option<(usize, usize)> {
        let ks: Vec<usize> = (0..self.len())
            .filter(|&k| self.branch_mismatch(k))
            .collect();
        Some((*ks.first()?, *ks.last()?))
    }

    /// Largest error outside the mismatch window extended by `settle` steps.
    pub fn max_error_outside_jump(&self, settle: usize) -> f64 {
        let win = self.mismatch_window();
        (0..self.len())
            .filter(|&k| win.is_none_or(|(a, b)| k < a || k > b + settle))
            .map(|k| self.errors[k])
            .filter(|e| e.is_finite())
            .fold(0.0, f64::max)
    }

    /// Index of the largest error.
    pub fn spike(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (k, &e) in self.errors.iter().enumerate() {
            if e.is_finite() && best.is_none_or(|(_, b)| e > b) {
                best = Some((k, e));
            }
        }
        best.map(|(k, _)| k)
    }

    pub fn summary(&self) -> PathSummary {
        let (jumps, kinks) = events(&self.references, &self.reference_partitions);
        let (tracking_jumps, _) = events(&self.iterates, &self.partitions);
        PathSummary {
            max_error: self.max_error(),
            jumps,
            kinks,
            tracking_jumps,
            steps: self.len(),
            truncated: self
                .statuses
                .iter()
                .any(|s| matches!(s, StepStatus::Failed(_))),
        }
    }

    /// CSV with columns `k, x0.., err, branch_signature, status`.
    pub fn to_csv(&self) -> String {
        let n_x = self.xs.first().map_or(0, |x| x.len());
        let mut s = String::from("k");
        for i in 0..n_x {
            s.push_str(&format!(",x{i}"));
        }
        s.push_str(",err,branch_signature,status\n");
        for k in 0..self.len() {
            s.push_str(&k.to_string());
            for v in self.xs[k].iter() {
                s.push_str(&format!(",{v:.16e}"));
            }
            s.push_str(&format!(
                ",{:.16e},{},{}\n",
                self.errors[k],
                self.partitions[k],
                self.statuses[k].label()
            ));
        }
        s
    }
}

fn partition_of(prob: &MpccProblem, z: &PrimalDualPoint, x: &DVector<f64>) -> Result<String> {
    let (g, h) = prob.comp_values(&z.w, x)?;
    Ok(IndexPartition::from_values(&g, &h, TOL_ACT).signature())
}

/// Track the solution map along `xs` starting from `z0` (an approximate
/// solution at `xs[0]`). Each new parameter value gets `inner_iters` QPCC
/// steps; the first one is linearized at the previous parameter value with
/// the new value inserted, later ones at the new value.
pub fn follow(
    prob: &MpccProblem,
    xs: &[DVector<f64>],
    z0: &PrimalDualPoint,
    opts: &FollowOptions,
) -> Result<PathTrace> {
    prob.check_point(z0)?;
    if opts.inner_iters == 0 {
        return Err(Error::Problem("inner_iters must be at least 1".into()));
    }
    for x in xs {
        if x.len() != prob.n_x() {
            return Err(Error::Dimension {
                what: "parameter".into(),
                expected: prob.n_x(),
                got: x.len(),
            });
        }
    }
    let mut trace = PathTrace {
        xs: Vec::new(),
        iterates: Vec::new(),
        references: Vec::new(),
        errors: Vec::new(),
        partitions: Vec::new(),
        reference_partitions: Vec::new(),
        statuses: Vec::new(),
    };
    let Some(x0) = xs.first() else {
        return Ok(trace);
    };
    let build = QpccBuildOptions {
        hessian: opts.hessian,
        eps_reg: opts.eps_reg,
    };
    let mut oracle_prev = z0.clone();
    let mut push = |trace: &mut PathTrace,
                    x: &DVector<f64>,
                    z: PrimalDualPoint,
                    status: StepStatus|
     -> Result<()> {
        let (reference, err, status) = match solve_mpcc(prob, x, &oracle_prev, &opts.oracle) {
            Ok((zr, _)) => {
                let e = z.distance(&zr);
                oracle_prev = zr.clone();
                (zr, e, status)
            }
            Err(_) => {
                let st = if status == StepStatus::Tracked {
                    StepStatus::OracleFailed
                } else {
                    status
                };
                (oracle_prev.clone(), f64::NAN, st)
            }
        };
        trace.partitions.push(partition_of(prob, &z, x)?);
        trace
            .reference_partitions
            .push(partition_of(prob, &reference, x)?);
        trace.xs.push(x.clone());
        trace.iterates.push(z);
        trace.references.push(reference);
        trace.errors.push(err);
        trace.statuses.push(status);
        Ok(())
    };
    push(&mut trace, x0, z0.clone(), StepStatus::Start)?;
    let mut z = z0.clone();
    for k in 1..xs.len() {
        let mut failed = None;
        for it in 0..opts.inner_iters {
            let x_lin = if it == 0 { &xs[k - 1] } else { &xs[k] };
            let mut data = build_qpcc(prob, &z, x_lin, &build)?;
            data.set_parameter(&xs[k])?;
            let sol = solve_qpcc(&data, Some(&default_branch(&data)), &opts.qpcc);
            if sol.status != QpccStatus::SStationary {
                failed = Some(sol.status);
                break;
            }
            z = sol.apply(&z);
        }
        match failed {
            None => push(&mut trace, &xs[k], z.clone(), StepStatus::Tracked)?,
            Some(st) => {
                push(&mut trace, &xs[k], z.clone(), StepStatus::Failed(st))?;
                break;
            }
        }
    }
    Ok(trace)
}

/// Evenly spaced scalar parameter sequence from `a` towards `b` with step `dx`
/// (the endpoint is included when it lies on the grid). A step longer than
/// the whole range gives the single step `a -> b`.
pub fn scalar_sequence(a: f64, b: f64, dx: f64) -> Vec<DVector<f64>> {
    if !(dx.abs() > 0.0 && dx.is_finite()) {
        return vec![DVector::from_element(1, a)];
    }
    let ratio = ((b - a) / dx).abs();
    if ratio < 1.0 - 1e-9 && a != b {
        return vec![DVector::from_element(1, a), DVector::from_element(1, b)];
    }
    let n = (ratio + 1e-9).floor() as usize;
    let step = if b >= a { dx.abs() } else { -dx.abs() };
    (0..=n)
        .map(|k| DVector::from_element(1, a + step * k as f64))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictorRow {
    pub x: Vec<f64>,
    /// QPCC prediction; `None` if the QPCC had no S-stationary point.
    pub qpcc: Option<Vec<f64>>,
    pub qpcc_branch: String,
    /// Fixed-branch QP prediction; `None` if infeasible.
    pub branch_qp: Option<Vec<f64>>,
    /// Full solve; `None` if it failed.
    pub mpcc: Option<Vec<f64>>,
}

impl PredictorRow {
    fn err(a: &Option<Vec<f64>>, b: &Option<Vec<f64>>) -> Option<f64> {
        match (a, b) {
            (Some(a), Some(b)) => Some(
                a.iter()
                    .zip(b)
                    .map(|(p, q)| (p - q).abs())
                    .fold(0.0, f64::max),
            ),
            _ => None,
        }
    }

    /// Primal infinity-norm error of the QPCC prediction against the full solve.
    pub fn qpcc_error(&self) -> Option<f64> {
        Self::err(&self.qpcc, &self.mpcc)
    }

    pub fn qp_error(&self) -> Option<f64> {
        Self::err(&self.branch_qp, &self.mpcc)
    }

    /// Gap between the QPCC and branch QP predictions.
    pub fn qp_qpcc_gap(&self) -> Option<f64> {
        Self::err(&self.branch_qp, &self.qpcc)
    }
}

/// Compare first-order predictions from `z_bar` (a solution at `x_bar`) on a
/// parameter grid. The branch QP keeps the branch of `z_bar`. The full solve
/// is warm-started from the QPCC prediction when there is one.
pub fn predictor_comparison(
    prob: &MpccProblem,
    z_bar: &PrimalDualPoint,
    x_bar: &DVector<f64>,
    grid: &[DVector<f64>],
    opts: &FollowOptions,
) -> Result<Vec<PredictorRow>> {
    let build = QpccBuildOptions {
        hessian: opts.hessian,
        eps_reg: opts.eps_reg,
    };
    let mut data = build_qpcc(prob, z_bar, x_bar, &build)?;
    let branch = default_branch(&data);
    let fixed = QpccOptions {
        fixed_branch: true,
        ..opts.qpcc.clone()
    };
    let mut rows = Vec::with_capacity(grid.len());
    for x in grid {
        data.set_parameter(x)?;
        let sol = solve_qpcc(&data, Some(&branch), &opts.qpcc);
        let qpcc = (sol.status == QpccStatus::SStationary).then(|| sol.apply(z_bar));
        let qp = solve_qpcc(&data, Some(&branch), &fixed);
        let branch_qp = (qp.status == QpccStatus::SStationary)
            .then(|| (&z_bar.w + &qp.dw).iter().copied().collect());
        let warm = qpcc.clone().unwrap_or_else(|| z_bar.clone());
        let mpcc = solve_mpcc(prob, x, &warm, &opts.oracle)
            .ok()
            .map(|(z, _)| z.w.iter().copied().collect());
        rows.push(PredictorRow {
            x: x.iter().copied().collect(),
            qpcc: qpcc.map(|z| z.w.iter().copied().collect()),
            qpcc_branch: sol.branch_signature(),
            branch_qp,
            mpcc,
        });
    }
    Ok(rows)
}

/// Least-squares fit `err ~ c2 dx^2 + c3 |dx|^3` (leading quadratic term
/// plus the next order); returns `(c2, c3, R^2)`.
pub fn predictor_error_fit(dx: &[f64], err: &[f64]) -> (f64, f64, f64) {
    let n = dx.len().min(err.len());
    let a = DMatrix::from_fn(n, 2, |i, j| dx[i].abs().powi(2 + j as i32));
    let e = DVector::from_column_slice(&err[..n]);
    let c = match a.clone().svd(true, true).solve(&e, 1e-14) {
        Ok(c) => c,
        Err(_) => return (0.0, 0.0, 0.0),
    };
    let mean = e.mean();
    let ss_tot: f64 = e.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res = (&a * &c - &e).norm_squared();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        1.0
    };
    (c[0], c[1], r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{tutorial21, tutorial21_solution};

    #[test]
    fn constant_sequence_stays_put() {
        let prob = tutorial21();
        let z0 = tutorial21_solution(-0.5);
        let xs = vec![DVector::from_element(1, -0.5); 6];
        let tr = follow(&prob, &xs, &z0, &FollowOptions::default()).unwrap();
        assert_eq!(tr.len(), 6);
        assert!(tr.max_error() <= 1e-8, "{}", tr.max_error());
    }

    #[test]
    fn tracks_through_the_jump() {
        let prob = tutorial21();
        let xs = scalar_sequence(-0.75, 0.75, 0.05);
        let z0 = tutorial21_solution(-0.75);
        let tr = follow(&prob, &xs, &z0, &FollowOptions::default()).unwrap();
        assert_eq!(tr.len(), xs.len());
        let s = tr.summary();
        assert!(!s.truncated);
        assert_eq!(s.jumps.len(), 1, "{s:?}");
        assert!(!s.tracking_jumps.is_empty(), "{s:?}");
        let spike = tr.spike().unwrap();
        let (a, b) = tr.mismatch_window().unwrap();
        assert!(a <= spike && spike <= b);
        assert!(tr.errors[b + 5] < 0.1 * tr.errors[spike]);
        assert!(tr.max_error_outside_jump(5) < tr.errors[spike]);
        // the oracle follows the closed form
        for (x, r) in tr.xs.iter().zip(&tr.references) {
            let c = tutorial21_solution(x[0]);
            assert!((&c.w - &r.w).amax() < 1e-6, "x = {}", x[0]);
        }
        let csv = tr.to_csv();
        assert!(csv.starts_with("k,x0,err,branch_signature,status\n"));
        assert_eq!(csv.lines().count(), xs.len() + 1);
    }

    #[test]
    fn predictor_agrees_at_the_linearization_point() {
        let prob = tutorial21();
        let xb = DVector::from_element(1, -0.1);
        let zb = tutorial21_solution(-0.1);
        let rows = predictor_comparison(
            &prob,
            &zb,
            &xb,
            std::slice::from_ref(&xb),
            &FollowOptions::default(),
        )
        .unwrap();
        assert!(rows[0].qpcc_error().unwrap() < 1e-8);
        assert!(rows[0].qp_error().unwrap() < 1e-8);
    }

    #[test]
    fn error_fit_recovers_coefficients() {
        let dx: Vec<f64> = (-5..10).map(|k| k as f64 * 0.01).collect();
        let err: Vec<f64> = dx
            .iter()
            .map(|d| 3.0 * d * d + 0.5 * d.abs().powi(3))
            .collect();
        let (c2, c3, r2) = predictor_error_fit(&dx, &err);
        assert!((c2 - 3.0).abs() < 1e-8 && (c3 - 0.5).abs() < 1e-6 && r2 > 0.999999);
    }

    #[test]
    fn rejects_zero_inner_iterations() {
        let prob = tutorial21();
        let z0 = tutorial21_solution(-0.5);
        let o = FollowOptions {
            inner_iters: 0,
            ..Default::default()
        };
        assert!(follow(&prob, &[DVector::from_element(1, -0.5)], &z0, &o).is_err());
    }
}
