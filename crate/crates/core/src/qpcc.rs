//! Quadratic programs with linearized complementarity constraints
//!
//! ```text
//! min  grad_f' dw + ½ dw' Q dw
//! s.t. h + J_h dw + M x_new = 0
//!      g + J_g dw <= 0
//!      0 <= G + J_G dw  _|_  H + J_H dw >= 0
//! ```
//!
//! solved to S-stationarity by pivoting over branch QPs.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{IndexPartition, MpccProblem, PrimalDualPoint};
use crate::qp::{regularize, solve_qp, QpData, QpOptions, QpSolution, QpStatus};
use crate::serde_dvec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    Exact,
    GaussNewton,
}

impl std::str::FromStr for HessianMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(HessianMode::Exact),
            "gn" | "gauss-newton" | "gauss_newton" => Ok(HessianMode::GaussNewton),
            other => Err(Error::Parse(format!("unknown Hessian mode `{other}`"))),
        }
    }
}

/// Dense QPCC at a linearization point. `q_mat` may contain the term
/// `rho * J_h' J_h`, which is constant on the linearized equality set; the
/// reported equality multipliers are corrected for it.
#[derive(Clone, Debug)]
pub struct QpccData {
    pub q_mat: DMatrix<f64>,
    pub rho: f64,
    pub grad_f: DVector<f64>,
    pub h: DVector<f64>,
    pub jac_h: DMatrix<f64>,
    pub coupling: DMatrix<f64>,
    /// Parameter slot entering through `M x_new`.
    pub x_new: DVector<f64>,
    pub g: DVector<f64>,
    pub jac_g: DMatrix<f64>,
    pub cg: DVector<f64>,
    pub jac_cg: DMatrix<f64>,
    pub ch: DVector<f64>,
    pub jac_ch: DMatrix<f64>,
}

impl QpccData {
    pub fn n(&self) -> usize {
        self.grad_f.len()
    }
    pub fn m(&self) -> usize {
        self.cg.len()
    }
    pub fn m_h(&self) -> usize {
        self.h.len()
    }
    pub fn m_g(&self) -> usize {
        self.g.len()
    }

    /// Insert a new parameter value; nothing else changes.
    pub fn set_parameter(&mut self, x_new: &DVector<f64>) -> Result<()> {
        check_dim("parameter", self.x_new.len(), x_new.len())?;
        self.x_new.copy_from(x_new);
        Ok(())
    }

    pub fn objective(&self, dw: &DVector<f64>) -> f64 {
        self.grad_f.dot(dw) + 0.5 * dw.dot(&(&self.q_mat * dw))
    }

    /// Linearized complementarity values `(G + J_G dw, H + J_H dw)`.
    pub fn comp_values(&self, dw: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (&self.cg + &self.jac_cg * dw, &self.ch + &self.jac_ch * dw)
    }

    fn eq_residual(&self) -> DVector<f64> {
        &self.h + &self.coupling * &self.x_new
    }

    /// Branch QP: pinned sides as equalities, the other sides as `>= 0`.
    /// Inequality rows are `g` followed by one row per pair.
    pub fn branch_qp(&self, branch: &[bool]) -> QpData {
        let n = self.n();
        let (m_h, m_g, m) = (self.m_h(), self.m_g(), self.m());
        let mut a_eq = DMatrix::zeros(m_h + m, n);
        let mut b_eq = DVector::zeros(m_h + m);
        a_eq.rows_mut(0, m_h).copy_from(&self.jac_h);
        b_eq.rows_mut(0, m_h).copy_from(&self.eq_residual());
        let mut a_in = DMatrix::zeros(m_g + m, n);
        let mut b_in = DVector::zeros(m_g + m);
        a_in.rows_mut(0, m_g).copy_from(&self.jac_g);
        b_in.rows_mut(0, m_g).copy_from(&self.g);
        for (i, &pin_g) in branch.iter().enumerate() {
            let (pj, pv, oj, ov) = if pin_g {
                (&self.jac_cg, self.cg[i], &self.jac_ch, self.ch[i])
            } else {
                (&self.jac_ch, self.ch[i], &self.jac_cg, self.cg[i])
            };
            a_eq.row_mut(m_h + i).copy_from(&pj.row(i));
            b_eq[m_h + i] = pv;
            a_in.row_mut(m_g + i).copy_from(&(-oj.row(i)));
            b_in[m_g + i] = -ov;
        }
        QpData {
            q_mat: self.q_mat.clone(),
            q: self.grad_f.clone(),
            a_eq,
            b_eq,
            a_in,
            b_in,
        }
    }

    /// Map branch-QP multipliers to `(lambda, mu, xi, nu)`.
    fn map_multipliers(
        &self,
        branch: &[bool],
        qs: &QpSolution,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
        let (m_h, m_g, m) = (self.m_h(), self.m_g(), self.m());
        let mut lambda = qs.lambda.rows(0, m_h).into_owned();
        if self.rho != 0.0 {
            lambda += &self.jac_h * &qs.d * self.rho;
        }
        let mu = qs.mu.rows(0, m_g).into_owned();
        let mut xi = DVector::zeros(m);
        let mut nu = DVector::zeros(m);
        for (i, &pin_g) in branch.iter().enumerate() {
            let pinned = -qs.lambda[m_h + i];
            let other = qs.mu[m_g + i];
            if pin_g {
                xi[i] = pinned;
                nu[i] = other;
            } else {
                nu[i] = pinned;
                xi[i] = other;
            }
        }
        (lambda, mu, xi, nu)
    }

    /// Infinity-norm S-stationarity residual of a candidate QPCC point: KKT
    /// of the QPCC plus the sign rules on linearized degenerate pairs.
    pub fn s_stationarity_residual(&self, sol: &QpccSolution, tol_act: f64) -> f64 {
        let dw = &sol.dw;
        let lam_qp = &sol.lambda - &self.jac_h * dw * self.rho;
        let stat = (&self.q_mat * dw
            + &self.grad_f
            + self.jac_h.tr_mul(&lam_qp)
            + self.jac_g.tr_mul(&sol.mu)
            - self.jac_cg.tr_mul(&sol.xi)
            - self.jac_ch.tr_mul(&sol.nu))
        .amax();
        let eq = (self.eq_residual() + &self.jac_h * dw).amax();
        let gl = &self.g + &self.jac_g * dw;
        let mut res = stat.max(eq);
        for j in 0..self.m_g() {
            res = res
                .max(gl[j].max(0.0))
                .max((-sol.mu[j]).max(0.0))
                .max((sol.mu[j] * gl[j]).abs());
        }
        let (a, b) = self.comp_values(dw);
        for i in 0..self.m() {
            res = res
                .max(a[i].min(b[i]).abs())
                .max((-a[i]).max(0.0))
                .max((-b[i]).max(0.0));
            if a[i] > tol_act {
                res = res.max(sol.xi[i].abs().min(a[i]));
            }
            if b[i] > tol_act {
                res = res.max(sol.nu[i].abs().min(b[i]));
            }
            if a[i] <= tol_act && b[i] <= tol_act {
                res = res.max((-sol.xi[i]).max(0.0)).max((-sol.nu[i]).max(0.0));
            }
        }
        res
    }
}

#[derive(Clone, Debug)]
pub struct QpccBuildOptions {
    pub hessian: HessianMode,
    /// Smallest eigenvalue enforced when regularization is needed (relative).
    pub eps_reg: f64,
}

impl Default for QpccBuildOptions {
    fn default() -> Self {
        QpccBuildOptions {
            hessian: HessianMode::Exact,
            eps_reg: 1e-8,
        }
    }
}

fn is_pd(q: &DMatrix<f64>, eps: f64) -> bool {
    match q.clone().cholesky() {
        Some(c) => {
            let l = c.l();
            let dmin = l
                .diagonal()
                .iter()
                .fold(f64::INFINITY, |a, &v| a.min(v * v));
            dmin >= eps
        }
        None => false,
    }
}

/// Make a Hessian approximation positive definite: first by adding
/// `rho * J_h' J_h` (exact on the linearized equality set), then by
/// eigenvalue clipping as a last resort.
pub fn convexify(q: &DMatrix<f64>, jac_h: &DMatrix<f64>, eps_reg: f64) -> (DMatrix<f64>, f64) {
    let scale = q.amax().max(1.0);
    let eps = eps_reg * scale;
    let jtj = jac_h.tr_mul(jac_h);
    let mut last = q.clone();
    let mut last_rho = 0.0;
    for rho in [0.0, 1.0, 10.0, 100.0, 1e3, 1e4] {
        let cand = q + &jtj * rho;
        if is_pd(&cand, eps) {
            return (cand, rho);
        }
        last = cand;
        last_rho = rho;
    }
    (regularize(&last, eps), last_rho)
}

/// Linearize `prob` at `z` (functions evaluated at parameter `x_lin`) and
/// assemble the QPCC with its parameter slot set to `x_lin`.
pub fn build_qpcc(
    prob: &MpccProblem,
    z: &PrimalDualPoint,
    x_lin: &DVector<f64>,
    opts: &QpccBuildOptions,
) -> Result<QpccData> {
    prob.check_point(z)?;
    let lin = prob.linearize(&z.w, x_lin)?;
    let q_raw = match opts.hessian {
        HessianMode::Exact => prob.lagrangian_hessian(z, x_lin)?,
        HessianMode::GaussNewton => prob.gauss_newton_hessian(&z.w, x_lin)?,
    };
    let (q_mat, rho) = convexify(&q_raw, &lin.jac_h, opts.eps_reg);
    Ok(QpccData {
        q_mat,
        rho,
        grad_f: lin.grad_f,
        h: lin.h,
        jac_h: lin.jac_h,
        coupling: prob.coupling().clone(),
        x_new: x_lin.clone(),
        g: lin.g,
        jac_g: lin.jac_g,
        cg: lin.cg,
        jac_cg: lin.jac_cg,
        ch: lin.ch,
        jac_ch: lin.jac_ch,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpccStatus {
    SStationary,
    Infeasible,
    BranchCycle,
    MaxPivots,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QpccSolution {
    #[serde(with = "serde_dvec")]
    pub dw: DVector<f64>,
    #[serde(with = "serde_dvec")]
    pub lambda: DVector<f64>,
    #[serde(with = "serde_dvec")]
    pub mu: DVector<f64>,
    #[serde(with = "serde_dvec")]
    pub xi: DVector<f64>,
    #[serde(with = "serde_dvec")]
    pub nu: DVector<f64>,
    pub branch: Vec<bool>,
    pub status: QpccStatus,
    pub objective: f64,
    pub pivots: usize,
    pub qp_solves: usize,
    /// Inequality working set of the last branch QP (warm start for the next solve).
    pub active_set: Vec<usize>,
    /// Branch signatures visited, in order.
    pub branch_log: Vec<String>,
    pub used_brute_force: bool,
}

impl QpccSolution {
    /// Apply the step to a primal-dual point: primal update, multipliers replaced.
    pub fn apply(&self, z: &PrimalDualPoint) -> PrimalDualPoint {
        PrimalDualPoint {
            w: &z.w + &self.dw,
            lambda: self.lambda.clone(),
            mu: self.mu.clone(),
            xi: self.xi.clone(),
            nu: self.nu.clone(),
        }
    }

    pub fn branch_signature(&self) -> String {
        self.branch
            .iter()
            .map(|&b| if b { 'G' } else { 'H' })
            .collect()
    }

    fn failed(data: &QpccData, branch: Vec<bool>, status: QpccStatus, d: DVector<f64>) -> Self {
        QpccSolution {
            dw: d,
            lambda: DVector::zeros(data.m_h()),
            mu: DVector::zeros(data.m_g()),
            xi: DVector::zeros(data.m()),
            nu: DVector::zeros(data.m()),
            branch,
            status,
            objective: f64::INFINITY,
            pivots: 0,
            qp_solves: 0,
            active_set: Vec::new(),
            branch_log: Vec::new(),
            used_brute_force: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct QpccOptions {
    /// Tolerance for multiplier signs on degenerate linearized pairs.
    pub tol_sign: f64,
    /// A linearized side at or below this value counts as active.
    pub tol_act: f64,
    pub max_pivots: usize,
    /// Fall back to enumeration on cycles when `m` is at most this.
    pub brute_force_limit: usize,
    /// Solve only the starting branch (no pivoting).
    pub fixed_branch: bool,
    pub qp: QpOptions,
}

impl Default for QpccOptions {
    fn default() -> Self {
        QpccOptions {
            tol_sign: 1e-9,
            tol_act: 1e-9,
            max_pivots: 200,
            brute_force_limit: 16,
            fixed_branch: false,
            qp: QpOptions::default(),
        }
    }
}

thread_local! {
    static QPCC_SOLVES: Cell<u64> = const { Cell::new(0) };
    static RECORDER: RefCell<Option<Vec<(QpccData, QpccSolution)>>> = const { RefCell::new(None) };
}

/// Number of `solve_qpcc` calls on this thread.
pub fn qpcc_solve_count() -> u64 {
    QPCC_SOLVES.with(|c| c.get())
}

/// Start recording every `(data, solution)` pair produced by `solve_qpcc`
/// on this thread.
pub fn start_recording() {
    RECORDER.with(|r| *r.borrow_mut() = Some(Vec::new()));
}

/// Stop recording and return what was captured.
pub fn take_recording() -> Vec<(QpccData, QpccSolution)> {
    RECORDER.with(|r| r.borrow_mut().take().unwrap_or_default())
}

fn record(data: &QpccData, sol: &QpccSolution) {
    RECORDER.with(|r| {
        if let Some(v) = r.borrow_mut().as_mut() {
            v.push((data.clone(), sol.clone()));
        }
    });
}

fn signature(branch: &[bool]) -> String {
    branch.iter().map(|&b| if b { 'G' } else { 'H' }).collect()
}

/// Default starting branch: pin the side that is smaller at the linearization point.
pub fn default_branch(data: &QpccData) -> Vec<bool> {
    IndexPartition::from_values(&data.cg, &data.ch, 0.0).branch
}

/// Solve one branch QP and map its multipliers.
pub fn solve_branch(
    data: &QpccData,
    branch: &[bool],
    warm: Option<&[usize]>,
    qp_opts: &QpOptions,
) -> (QpSolution, QpccSolution) {
    let qd = data.branch_qp(branch);
    let qs = solve_qp(&qd, warm, qp_opts);
    let status = match qs.status {
        QpStatus::Optimal => QpccStatus::SStationary,
        QpStatus::Infeasible => QpccStatus::Infeasible,
        QpStatus::MaxIter => QpccStatus::MaxPivots,
    };
    if qs.status != QpStatus::Optimal {
        let mut s = QpccSolution::failed(data, branch.to_vec(), status, qs.d.clone());
        s.qp_solves = 1;
        return (qs, s);
    }
    let (lambda, mu, xi, nu) = data.map_multipliers(branch, &qs);
    let sol = QpccSolution {
        objective: data.objective(&qs.d),
        dw: qs.d.clone(),
        lambda,
        mu,
        xi,
        nu,
        branch: branch.to_vec(),
        status,
        pivots: 0,
        qp_solves: 1,
        active_set: qs.active_set.clone(),
        branch_log: vec![signature(branch)],
        used_brute_force: false,
    };
    (qs, sol)
}

/// Most negative multiplier on a linearized degenerate pair, as `(index, value)`.
fn worst_sign_violation(
    data: &QpccData,
    sol: &QpccSolution,
    opts: &QpccOptions,
) -> Option<(usize, f64)> {
    let (a, b) = data.comp_values(&sol.dw);
    let scale = data.grad_f.amax().max(1.0);
    let tol = opts.tol_sign * scale;
    let mut worst: Option<(usize, f64)> = None;
    for i in 0..data.m() {
        let other = if sol.branch[i] { b[i] } else { a[i] };
        if other > opts.tol_act {
            continue;
        }
        // the pinned side carries the free multiplier
        let pinned_mult = if sol.branch[i] { sol.xi[i] } else { sol.nu[i] };
        if pinned_mult < -tol && worst.is_none_or(|(_, v)| pinned_mult < v) {
            worst = Some((i, pinned_mult));
        }
    }
    worst
}

/// Pair whose branch constraints are most violated at a phase-1 point.
fn most_violated_pair(data: &QpccData, branch: &[bool], d: &DVector<f64>) -> Option<usize> {
    let (a, b) = data.comp_values(d);
    let mut best: Option<(usize, f64)> = None;
    for (i, &pin_g) in branch.iter().enumerate() {
        let (p, o) = if pin_g { (a[i], b[i]) } else { (b[i], a[i]) };
        let v = p.abs().max(-o);
        if v > 1e-12 && best.is_none_or(|(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Solve the QPCC to S-stationarity by branch pivoting.
pub fn solve_qpcc(
    data: &QpccData,
    start_branch: Option<&[bool]>,
    opts: &QpccOptions,
) -> QpccSolution {
    QPCC_SOLVES.with(|c| c.set(c.get() + 1));
    let sol = solve_qpcc_inner(data, start_branch, opts);
    // fixed-branch calls are plain branch QPs
    if !opts.fixed_branch {
        record(data, &sol);
    }
    sol
}

fn solve_qpcc_inner(
    data: &QpccData,
    start_branch: Option<&[bool]>,
    opts: &QpccOptions,
) -> QpccSolution {
    let m = data.m();
    let mut branch = match start_branch {
        Some(b) if b.len() == m => b.to_vec(),
        _ => default_branch(data),
    };
    let mut visited: HashSet<Vec<bool>> = HashSet::new();
    let mut log = Vec::new();
    let mut warm: Option<Vec<usize>> = None;
    let mut qp_solves = 0;
    for pivot in 0..=opts.max_pivots {
        visited.insert(branch.clone());
        log.push(signature(&branch));
        let (qs, mut sol) = solve_branch(data, &branch, warm.as_deref(), &opts.qp);
        qp_solves += 1;
        sol.pivots = pivot;
        sol.qp_solves = qp_solves;
        sol.branch_log = log.clone();
        if opts.fixed_branch {
            return sol;
        }
        let flip = match qs.status {
            QpStatus::Optimal => match worst_sign_violation(data, &sol, opts) {
                None => return sol,
                Some((i, _)) => Some(i),
            },
            QpStatus::Infeasible => most_violated_pair(data, &branch, &qs.d),
            QpStatus::MaxIter => None,
        };
        let enumerate = |branch: Vec<bool>, log: Vec<String>| {
            let mut bf = brute_force_qpcc(data, &opts.qp);
            let mut s = match bf.best.take() {
                Some(best) => best,
                None => QpccSolution::failed(data, branch, QpccStatus::Infeasible, qs.d.clone()),
            };
            s.pivots = pivot + 1;
            s.qp_solves = qp_solves + bf.qp_solves;
            s.branch_log = log;
            s.used_brute_force = true;
            s
        };
        let Some(i) = flip else {
            // stuck in phase 1 with nothing to flip: let enumeration decide
            if qs.status == QpStatus::Infeasible && m <= opts.brute_force_limit {
                return enumerate(branch, log);
            }
            return sol;
        };
        warm = Some(qs.active_set.clone());
        branch[i] = !branch[i];
        if visited.contains(&branch) {
            if m <= opts.brute_force_limit {
                return enumerate(branch, log);
            }
            let mut s = QpccSolution::failed(data, branch, QpccStatus::BranchCycle, qs.d);
            s.pivots = pivot + 1;
            s.qp_solves = qp_solves;
            s.branch_log = log;
            return s;
        }
    }
    let mut s = QpccSolution::failed(
        data,
        branch,
        QpccStatus::MaxPivots,
        DVector::zeros(data.n()),
    );
    s.pivots = opts.max_pivots;
    s.qp_solves = qp_solves;
    s.branch_log = log;
    s
}

pub struct BruteForceResult {
    /// Lowest-objective S-stationary point, if any branch is feasible.
    pub best: Option<QpccSolution>,
    /// Every branch-QP solution that certifies S-stationary for the QPCC.
    pub candidates: Vec<QpccSolution>,
    pub qp_solves: usize,
}

/// Largest `m` accepted by [`brute_force_qpcc`].
pub const BRUTE_FORCE_MAX_M: usize = 16;

/// Enumerate all `2^m` branch QPs and keep the S-stationary ones.
pub fn brute_force_qpcc(data: &QpccData, qp_opts: &QpOptions) -> BruteForceResult {
    let m = data.m();
    assert!(
        m <= BRUTE_FORCE_MAX_M,
        "brute force limited to m <= {BRUTE_FORCE_MAX_M}"
    );
    let mut candidates: Vec<QpccSolution> = Vec::new();
    let mut solves = 0;
    let tol = 1e-7 * data.grad_f.amax().max(1.0);
    for mask in 0..(1usize << m) {
        let branch: Vec<bool> = (0..m).map(|i| mask & (1 << i) != 0).collect();
        let (qs, sol) = solve_branch(data, &branch, None, qp_opts);
        solves += 1;
        if qs.status != QpStatus::Optimal {
            continue;
        }
        if data.s_stationarity_residual(&sol, 1e-9) <= tol {
            candidates.push(sol);
        }
    }
    let best = candidates
        .iter()
        .min_by(|a, b| a.objective.total_cmp(&b.objective))
        .cloned();
    BruteForceResult {
        best,
        candidates,
        qp_solves: solves,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry;
    use approx::assert_relative_eq;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    /// min (d1-1)^2 + (d2-1)^2 s.t. 0 <= d1 _|_ d2 >= 0 (constant dropped)
    fn toy() -> QpccData {
        QpccData {
            q_mat: DMatrix::identity(2, 2) * 2.0,
            rho: 0.0,
            grad_f: dv(&[-2.0, -2.0]),
            h: dv(&[]),
            jac_h: DMatrix::zeros(0, 2),
            coupling: DMatrix::zeros(0, 0),
            x_new: dv(&[]),
            g: dv(&[]),
            jac_g: DMatrix::zeros(0, 2),
            cg: dv(&[0.0]),
            jac_cg: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            ch: dv(&[0.0]),
            jac_ch: DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
        }
    }

    #[test]
    fn toy_qpcc_reaches_a_corner() {
        let data = toy();
        let sol = solve_qpcc(&data, Some(&[true]), &QpccOptions::default());
        assert_eq!(sol.status, QpccStatus::SStationary);
        assert_relative_eq!(sol.objective, -1.0, epsilon = 1e-12);
        assert_relative_eq!(sol.dw, dv(&[0.0, 1.0]), epsilon = 1e-12);
        let bf = brute_force_qpcc(&data, &QpOptions::default());
        assert_eq!(bf.candidates.len(), 2);
        assert_relative_eq!(bf.best.unwrap().objective, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn contradictory_linearization_is_infeasible() {
        let mut data = toy();
        data.h = dv(&[-1.0, 0.0]);
        data.jac_h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        data.coupling = DMatrix::zeros(2, 0);
        let bf = brute_force_qpcc(&data, &QpOptions::default());
        assert!(bf.best.is_none());
        let sol = solve_qpcc(&data, None, &QpccOptions::default());
        assert_eq!(sol.status, QpccStatus::Infeasible, "{sol:?}");
    }

    #[test]
    fn fixed_point_at_solution() {
        let p = registry::tutorial21();
        let x = dv(&[-0.5]);
        let z = registry::tutorial21_solution(-0.5);
        let data = build_qpcc(&p, &z, &x, &QpccBuildOptions::default()).unwrap();
        let sol = solve_qpcc(&data, None, &QpccOptions::default());
        assert_eq!(sol.status, QpccStatus::SStationary);
        assert!(sol.dw.amax() <= 1e-10, "{}", sol.dw.amax());
        assert_relative_eq!(sol.lambda, z.lambda, epsilon = 1e-8);
        assert_relative_eq!(sol.xi, z.xi, epsilon = 1e-8);
    }

    #[test]
    fn example3_linearization() {
        let p = registry::jump2d();
        let x = dv(&[0.0]);
        let z = registry::jump2d_solution(0.0);
        let data = build_qpcc(&p, &z, &x, &QpccBuildOptions::default()).unwrap();
        assert_eq!(data.cg[0], 0.0);
        assert_eq!(data.ch[0], 1.0);
        assert_eq!(
            data.jac_cg.row(0).iter().copied().collect::<Vec<_>>(),
            vec![1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn example2_agrees_with_enumeration() {
        let p = registry::pulsc2d();
        let z = registry::pulsc2d_solution(0.0);
        let mut data = build_qpcc(&p, &z, &dv(&[0.0]), &QpccBuildOptions::default()).unwrap();
        data.set_parameter(&dv(&[0.3])).unwrap();
        let sol = solve_qpcc(&data, None, &QpccOptions::default());
        let bf = brute_force_qpcc(&data, &QpOptions::default());
        assert_eq!(sol.status, QpccStatus::SStationary);
        assert_relative_eq!(sol.objective, bf.best.unwrap().objective, epsilon = 1e-10);
    }

    #[test]
    fn gauss_newton_hessian_for_least_squares() {
        let p = registry::pulsc2d();
        let z = registry::pulsc2d_solution(0.5);
        let opts = QpccBuildOptions {
            hessian: HessianMode::GaussNewton,
            ..Default::default()
        };
        let data = build_qpcc(&p, &z, &dv(&[0.5]), &opts).unwrap();
        let lin = p
            .residual_fn()
            .unwrap()
            .jacobian(&z.w, &dv(&[0.5]))
            .unwrap();
        let expected = lin.tr_mul(&lin) * 2.0 + data.jac_h.tr_mul(&data.jac_h) * data.rho;
        assert_relative_eq!(data.q_mat, expected, epsilon = 1e-12);
    }

    #[test]
    fn no_pairs_is_a_single_qp() {
        let data = QpccData {
            q_mat: DMatrix::identity(1, 1),
            rho: 0.0,
            grad_f: dv(&[-1.0]),
            h: dv(&[]),
            jac_h: DMatrix::zeros(0, 1),
            coupling: DMatrix::zeros(0, 0),
            x_new: dv(&[]),
            g: dv(&[]),
            jac_g: DMatrix::zeros(0, 1),
            cg: dv(&[]),
            jac_cg: DMatrix::zeros(0, 1),
            ch: dv(&[]),
            jac_ch: DMatrix::zeros(0, 1),
        };
        let sol = solve_qpcc(&data, None, &QpccOptions::default());
        assert_eq!(sol.qp_solves, 1);
        assert_relative_eq!(sol.dw[0], 1.0);
    }
}
