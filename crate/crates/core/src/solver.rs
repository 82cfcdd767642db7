//! Full MPCC solvers: SQPCC (one QPCC per iteration, full steps) and a
//! Scholtes smoothing homotopy.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{IndexPartition, MpccProblem, PrimalDualPoint};
use crate::qp::{solve_qp, QpData, QpOptions, QpStatus};
use crate::qpcc::{
    build_qpcc, convexify, solve_qpcc, HessianMode, QpccBuildOptions, QpccOptions, QpccStatus,
};

#[derive(Clone, Debug)]
pub struct SqpccOptions {
    pub hessian: HessianMode,
    pub max_iter: usize,
    pub tol_stat: f64,
    pub tol_feas: f64,
    pub tol_comp: f64,
    pub eps_reg: f64,
    pub qpcc: QpccOptions,
    /// Converged solution used to measure errors and contraction ratios.
    pub reference: Option<PrimalDualPoint>,
}

impl Default for SqpccOptions {
    fn default() -> Self {
        SqpccOptions {
            hessian: HessianMode::Exact,
            max_iter: 50,
            tol_stat: 1e-10,
            tol_feas: 1e-10,
            tol_comp: 1e-10,
            eps_reg: 1e-8,
            qpcc: QpccOptions::default(),
            reference: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    SubproblemFailed,
    Diverged,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveStats {
    pub status: SolveStatus,
    pub iterations: usize,
    pub iterates: Vec<PrimalDualPoint>,
    pub step_norms: Vec<f64>,
    pub kkt_residuals: Vec<f64>,
    /// `||z^k - z*||` when a reference is supplied.
    pub errors: Vec<f64>,
    /// `e_{k+1} / e_k`.
    pub contraction_ratios: Vec<f64>,
    pub qpcc_pivots: Vec<usize>,
    pub branches: Vec<String>,
}

impl SolveStats {
    fn new() -> Self {
        SolveStats {
            status: SolveStatus::MaxIter,
            iterations: 0,
            iterates: Vec::new(),
            step_norms: Vec::new(),
            kkt_residuals: Vec::new(),
            errors: Vec::new(),
            contraction_ratios: Vec::new(),
            qpcc_pivots: Vec::new(),
            branches: Vec::new(),
        }
    }

    fn push_iterate(&mut self, z: &PrimalDualPoint, kkt: f64, reference: Option<&PrimalDualPoint>) {
        self.iterates.push(z.clone());
        self.kkt_residuals.push(kkt);
        if let Some(r) = reference {
            let e = z.distance(r);
            if let Some(&prev) = self.errors.last() {
                self.contraction_ratios
                    .push(if prev > 0.0 { e / prev } else { 0.0 });
            }
            self.errors.push(e);
        }
    }
}

/// Infinity-norm S-stationarity residual: Lagrangian gradient, primal
/// feasibility, complementarity of each multiplier with its constraint, and
/// negative parts of `xi`, `nu` on the degenerate set. Zero iff `z` is
/// S-stationary.
pub fn kkt_residual(prob: &MpccProblem, z: &PrimalDualPoint, x: &DVector<f64>) -> Result<f64> {
    prob.check_point(z)?;
    let lin = prob.linearize(&z.w, x)?;
    let mut r = lin.lagrangian_gradient(z).amax();
    r = r.max((&lin.h + prob.coupling() * x).amax());
    for j in 0..prob.m_g() {
        let (g, mu) = (lin.g[j], z.mu[j]);
        r = r
            .max(g.max(0.0))
            .max((-mu).max(0.0))
            .max(mu.abs().min(g.abs()));
    }
    let part = IndexPartition::from_values(&lin.cg, &lin.ch, crate::model::TOL_ACT);
    for i in 0..prob.m() {
        let (a, b) = (lin.cg[i], lin.ch[i]);
        r = r
            .max(a.min(b).abs())
            .max((-a).max(0.0))
            .max((-b).max(0.0))
            .max(z.xi[i].abs().min(a.abs()))
            .max(z.nu[i].abs().min(b.abs()));
    }
    for &i in &part.i_00 {
        r = r.max((-z.xi[i]).max(0.0)).max((-z.nu[i]).max(0.0));
    }
    Ok(r)
}

/// KKT residual of the branch NLP (pinned sides are equalities, the other
/// sides carry nonnegative multipliers).
pub fn branch_kkt_residual(
    prob: &MpccProblem,
    z: &PrimalDualPoint,
    x: &DVector<f64>,
    branch: &[bool],
) -> Result<f64> {
    prob.check_point(z)?;
    check_dim("branch", prob.m(), branch.len())?;
    let lin = prob.linearize(&z.w, x)?;
    let mut r = lin.lagrangian_gradient(z).amax();
    r = r.max((&lin.h + prob.coupling() * x).amax());
    for j in 0..prob.m_g() {
        let (g, mu) = (lin.g[j], z.mu[j]);
        r = r
            .max(g.max(0.0))
            .max((-mu).max(0.0))
            .max(mu.abs().min(g.abs()));
    }
    for (i, &pin_g) in branch.iter().enumerate() {
        let (p, o, om) = if pin_g {
            (lin.cg[i], lin.ch[i], z.nu[i])
        } else {
            (lin.ch[i], lin.cg[i], z.xi[i])
        };
        r = r
            .max(p.abs())
            .max((-o).max(0.0))
            .max((-om).max(0.0))
            .max(om.abs().min(o.abs()));
    }
    Ok(r)
}

/// Run SQPCC iterations and return the last iterate with statistics,
/// whatever the outcome.
pub fn sqpcc_run(
    prob: &MpccProblem,
    x: &DVector<f64>,
    z0: &PrimalDualPoint,
    opts: &SqpccOptions,
) -> Result<(PrimalDualPoint, SolveStats)> {
    prob.check_point(z0)?;
    check_dim("x", prob.n_x(), x.len())?;
    let build = QpccBuildOptions {
        hessian: opts.hessian,
        eps_reg: opts.eps_reg,
    };
    let tol = opts.tol_stat.min(opts.tol_feas).min(opts.tol_comp);
    let mut z = z0.clone();
    let mut stats = SolveStats::new();
    let mut branch: Option<Vec<bool>> = None;
    stats.push_iterate(&z, kkt_residual(prob, &z, x)?, opts.reference.as_ref());
    for it in 0..opts.max_iter {
        if *stats.kkt_residuals.last().unwrap() <= tol {
            stats.status = SolveStatus::Converged;
            stats.iterations = it;
            return Ok((z, stats));
        }
        let data = build_qpcc(prob, &z, x, &build)?;
        let sol = solve_qpcc(&data, branch.as_deref(), &opts.qpcc);
        if sol.status != QpccStatus::SStationary {
            stats.status = SolveStatus::SubproblemFailed;
            stats.iterations = it;
            return Ok((z, stats));
        }
        z = sol.apply(&z);
        stats.step_norms.push(sol.dw.norm());
        stats.qpcc_pivots.push(sol.pivots);
        stats.branches.push(sol.branch_signature());
        branch = Some(sol.branch.clone());
        if !z.is_finite() {
            stats.status = SolveStatus::Diverged;
            stats.iterations = it + 1;
            return Ok((z, stats));
        }
        stats.push_iterate(&z, kkt_residual(prob, &z, x)?, opts.reference.as_ref());
    }
    if *stats.kkt_residuals.last().unwrap() <= tol {
        stats.status = SolveStatus::Converged;
    }
    stats.iterations = opts.max_iter;
    Ok((z, stats))
}

/// SQPCC with full steps; errors unless converged.
pub fn sqpcc_solve(
    prob: &MpccProblem,
    x: &DVector<f64>,
    z0: &PrimalDualPoint,
    opts: &SqpccOptions,
) -> Result<(PrimalDualPoint, SolveStats)> {
    let (z, stats) = sqpcc_run(prob, x, z0, opts)?;
    match stats.status {
        SolveStatus::Converged => Ok((z, stats)),
        SolveStatus::SubproblemFailed => Err(Error::SubproblemInfeasible(format!(
            "QPCC failed at SQPCC iteration {}",
            stats.iterations
        ))),
        _ => Err(Error::MaxIter {
            iterations: stats.iterations,
            residual: *stats.kkt_residuals.last().unwrap(),
        }),
    }
}

/// SQP on a fixed branch NLP, using fixed-branch QPCCs.
pub fn solve_branch_nlp(
    prob: &MpccProblem,
    x: &DVector<f64>,
    z0: &PrimalDualPoint,
    branch: &[bool],
    opts: &SqpccOptions,
) -> Result<(PrimalDualPoint, SolveStats)> {
    check_dim("branch", prob.m(), branch.len())?;
    let build = QpccBuildOptions {
        hessian: opts.hessian,
        eps_reg: opts.eps_reg,
    };
    let qopts = QpccOptions {
        fixed_branch: true,
        ..opts.qpcc.clone()
    };
    let tol = opts.tol_stat.min(opts.tol_feas);
    let mut z = z0.clone();
    let mut stats = SolveStats::new();
    stats.push_iterate(
        &z,
        branch_kkt_residual(prob, &z, x, branch)?,
        opts.reference.as_ref(),
    );
    for it in 0..opts.max_iter {
        if *stats.kkt_residuals.last().unwrap() <= tol {
            stats.status = SolveStatus::Converged;
            stats.iterations = it;
            return Ok((z, stats));
        }
        let data = build_qpcc(prob, &z, x, &build)?;
        let sol = solve_qpcc(&data, Some(branch), &qopts);
        if sol.status != QpccStatus::SStationary {
            return Err(Error::SubproblemInfeasible(format!(
                "branch QP {} infeasible at iteration {it}",
                sol.branch_signature()
            )));
        }
        z = sol.apply(&z);
        stats.step_norms.push(sol.dw.norm());
        stats.push_iterate(
            &z,
            branch_kkt_residual(prob, &z, x, branch)?,
            opts.reference.as_ref(),
        );
    }
    Err(Error::MaxIter {
        iterations: opts.max_iter,
        residual: *stats.kkt_residuals.last().unwrap(),
    })
}

#[derive(Clone, Debug)]
pub struct ScholtesOptions {
    /// Strictly decreasing smoothing parameters.
    pub schedule: Vec<f64>,
    pub max_inner: usize,
    pub tol_inner: f64,
    /// Iterations without improving the best residual tenfold before giving up.
    pub patience: usize,
    pub eps_reg: f64,
}

/// Geometric schedule from `start` down to `end` by `factor`.
pub fn geometric_schedule(start: f64, end: f64, factor: f64) -> Vec<f64> {
    let mut s = Vec::new();
    let mut t = start;
    while t >= end * (1.0 - 1e-12) {
        s.push(t);
        t *= factor;
    }
    s
}

impl Default for ScholtesOptions {
    fn default() -> Self {
        ScholtesOptions {
            schedule: geometric_schedule(1e-1, 1e-8, 0.1),
            max_inner: 60,
            tol_inner: 1e-10,
            patience: 15,
            eps_reg: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScholtesStats {
    pub taus: Vec<f64>,
    /// Smoothed-KKT residual at the end of each stage.
    pub residuals: Vec<f64>,
    /// `max_i |G_i H_i - tau|` at the end of each stage.
    pub comp_residuals: Vec<f64>,
    pub inner_iterations: Vec<usize>,
}

/// Smoothed NLP in lifted variables `v = (w, a, b)`:
/// `h + Mx = 0`, `G(w) - a = 0`, `H(w) - b = 0`, `a_i b_i = tau`,
/// `g <= 0`, `a, b >= 0`.
struct Smoothed<'a> {
    prob: &'a MpccProblem,
    x: &'a DVector<f64>,
}

struct SmoothedState {
    w: DVector<f64>,
    a: DVector<f64>,
    b: DVector<f64>,
    lambda: DVector<f64>,
    eta_g: DVector<f64>,
    eta_h: DVector<f64>,
    zeta: DVector<f64>,
    mu: DVector<f64>,
    pi_a: DVector<f64>,
    pi_b: DVector<f64>,
}

impl SmoothedState {
    fn mpcc_point(&self) -> PrimalDualPoint {
        PrimalDualPoint {
            w: self.w.clone(),
            lambda: self.lambda.clone(),
            mu: self.mu.clone(),
            xi: -&self.eta_g,
            nu: -&self.eta_h,
        }
    }
}

impl Smoothed<'_> {
    /// Returns the QP data of one SQP step and the current KKT residual.
    fn step_data(&self, s: &SmoothedState, tau: f64, eps_reg: f64) -> Result<(QpData, f64, f64)> {
        let prob = self.prob;
        let (n, m, m_h, m_g) = (prob.n(), prob.m(), prob.m_h(), prob.m_g());
        let nv = n + 2 * m;
        let lin = prob.linearize(&s.w, self.x)?;
        let z = s.mpcc_point();
        let hw = prob.lagrangian_hessian(&z, self.x)?;
        let mut hess = DMatrix::zeros(nv, nv);
        hess.view_mut((0, 0), (n, n)).copy_from(&hw);
        for i in 0..m {
            hess[(n + i, n + m + i)] = s.zeta[i];
            hess[(n + m + i, n + i)] = s.zeta[i];
        }
        // equalities: h, G - a, H - b, a*b - tau
        let me = m_h + 3 * m;
        let mut a_eq = DMatrix::zeros(me, nv);
        let mut b_eq = DVector::zeros(me);
        a_eq.view_mut((0, 0), (m_h, n)).copy_from(&lin.jac_h);
        b_eq.rows_mut(0, m_h)
            .copy_from(&(&lin.h + prob.coupling() * self.x));
        for i in 0..m {
            a_eq.view_mut((m_h + i, 0), (1, n))
                .copy_from(&lin.jac_cg.row(i));
            a_eq[(m_h + i, n + i)] = -1.0;
            b_eq[m_h + i] = lin.cg[i] - s.a[i];
            a_eq.view_mut((m_h + m + i, 0), (1, n))
                .copy_from(&lin.jac_ch.row(i));
            a_eq[(m_h + m + i, n + m + i)] = -1.0;
            b_eq[m_h + m + i] = lin.ch[i] - s.b[i];
            a_eq[(m_h + 2 * m + i, n + i)] = s.b[i];
            a_eq[(m_h + 2 * m + i, n + m + i)] = s.a[i];
            b_eq[m_h + 2 * m + i] = s.a[i] * s.b[i] - tau;
        }
        let mi = m_g + 2 * m;
        let mut a_in = DMatrix::zeros(mi, nv);
        let mut b_in = DVector::zeros(mi);
        a_in.view_mut((0, 0), (m_g, n)).copy_from(&lin.jac_g);
        b_in.rows_mut(0, m_g).copy_from(&lin.g);
        for i in 0..m {
            a_in[(m_g + i, n + i)] = -1.0;
            b_in[m_g + i] = -s.a[i];
            a_in[(m_g + m + i, n + m + i)] = -1.0;
            b_in[m_g + m + i] = -s.b[i];
        }
        let mut grad = DVector::zeros(nv);
        grad.rows_mut(0, n).copy_from(&lin.grad_f);
        // KKT residual of the smoothed NLP
        let mut y_eq = DVector::zeros(me);
        y_eq.rows_mut(0, m_h).copy_from(&s.lambda);
        y_eq.rows_mut(m_h, m).copy_from(&s.eta_g);
        y_eq.rows_mut(m_h + m, m).copy_from(&s.eta_h);
        y_eq.rows_mut(m_h + 2 * m, m).copy_from(&s.zeta);
        let mut y_in = DVector::zeros(mi);
        y_in.rows_mut(0, m_g).copy_from(&s.mu);
        y_in.rows_mut(m_g, m).copy_from(&s.pi_a);
        y_in.rows_mut(m_g + m, m).copy_from(&s.pi_b);
        let stat = (&grad + a_eq.tr_mul(&y_eq) + a_in.tr_mul(&y_in)).amax();
        let mut res = stat.max(b_eq.amax());
        for k in 0..mi {
            res = res
                .max(b_in[k].max(0.0))
                .max((-y_in[k]).max(0.0))
                .max(y_in[k].abs().min(b_in[k].abs()));
        }
        let (q_mat, rho) = convexify(&hess, &a_eq, eps_reg);
        Ok((
            QpData {
                q_mat,
                q: grad,
                a_eq,
                b_eq,
                a_in,
                b_in,
            },
            res,
            rho,
        ))
    }
}

/// Scholtes smoothing homotopy: replace each pair by `G, H >= 0`,
/// `G_i H_i = tau` and solve the smoothed NLPs by full-step SQP along the
/// schedule, warm-starting each stage from the previous one.
pub fn scholtes_solve(
    prob: &MpccProblem,
    x: &DVector<f64>,
    z0: &PrimalDualPoint,
    opts: &ScholtesOptions,
) -> Result<(PrimalDualPoint, ScholtesStats)> {
    prob.check_point(z0)?;
    if opts.schedule.windows(2).any(|p| p[1] >= p[0]) || opts.schedule.iter().any(|&t| t <= 0.0) {
        return Err(Error::Problem(
            "smoothing schedule must be positive and strictly decreasing".into(),
        ));
    }
    let (n, m) = (prob.n(), prob.m());
    let (gv, hv) = prob.comp_values(&z0.w, x)?;
    let mut s = SmoothedState {
        w: z0.w.clone(),
        a: gv,
        b: hv,
        lambda: z0.lambda.clone(),
        eta_g: -&z0.xi,
        eta_h: -&z0.nu,
        zeta: DVector::zeros(m),
        mu: z0.mu.clone(),
        pi_a: DVector::zeros(m),
        pi_b: DVector::zeros(m),
    };
    let sm = Smoothed { prob, x };
    let mut stats = ScholtesStats {
        taus: Vec::new(),
        residuals: Vec::new(),
        comp_residuals: Vec::new(),
        inner_iterations: Vec::new(),
    };
    let schedule: &[f64] = if m == 0 {
        &opts.schedule[..1.min(opts.schedule.len())]
    } else {
        &opts.schedule
    };
    let qp_opts = QpOptions::default();
    for &tau in schedule {
        // move the lifted pair onto the new hyperbola, keeping the larger side
        for i in 0..m {
            if s.a[i] >= s.b[i] {
                s.a[i] = s.a[i].max(tau.sqrt());
                s.b[i] = tau / s.a[i];
            } else {
                s.b[i] = s.b[i].max(tau.sqrt());
                s.a[i] = tau / s.b[i];
            }
        }
        let mut best = f64::INFINITY;
        let mut since_best = 0;
        let mut iters = 0;
        let mut res;
        loop {
            let (qd, r, rho) = sm.step_data(&s, tau, opts.eps_reg)?;
            res = r;
            if res <= opts.tol_inner || iters >= opts.max_inner {
                break;
            }
            if res < 0.1 * best {
                best = res;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best > opts.patience {
                    break;
                }
            }
            let sol = solve_qp(&qd, None, &qp_opts);
            if sol.status != QpStatus::Optimal {
                return Err(Error::SubproblemInfeasible(format!(
                    "smoothed QP infeasible at tau = {tau:e}"
                )));
            }
            let d = &sol.d;
            // keep the lifted pair strictly inside the orthant, otherwise the
            // linearized hyperbola degenerates to 0 = tau
            let mut alpha: f64 = 1.0;
            for i in 0..m {
                for (v, dv) in [(s.a[i], d[n + i]), (s.b[i], d[n + m + i])] {
                    if dv < 0.0 {
                        alpha = alpha.min(-0.99 * v / dv);
                    }
                }
            }
            s.w += d.rows(0, n) * alpha;
            s.a += d.rows(n, m) * alpha;
            s.b += d.rows(n + m, m) * alpha;
            let m_h = prob.m_h();
            s.lambda = sol.lambda.rows(0, m_h).into_owned();
            s.eta_g = sol.lambda.rows(m_h, m).into_owned();
            s.eta_h = sol.lambda.rows(m_h + m, m).into_owned();
            s.zeta = sol.lambda.rows(m_h + 2 * m, m).into_owned();
            // undo the augmentation term on the equality multipliers
            if rho != 0.0 {
                let corr = &qd.a_eq * d * (rho * alpha);
                s.lambda += corr.rows(0, m_h);
                s.eta_g += corr.rows(m_h, m);
                s.eta_h += corr.rows(m_h + m, m);
                s.zeta += corr.rows(m_h + 2 * m, m);
            }
            let m_g = prob.m_g();
            s.mu = sol.mu.rows(0, m_g).into_owned();
            s.pi_a = sol.mu.rows(m_g, m).into_owned();
            s.pi_b = sol.mu.rows(m_g + m, m).into_owned();
            iters += 1;
            if !s.w.iter().all(|v| v.is_finite()) {
                return Err(Error::Failed(format!(
                    "smoothing diverged at tau = {tau:e}"
                )));
            }
        }
        if res > 1e-6 {
            return Err(Error::Failed(format!(
                "smoothed NLP at tau = {tau:e} stalled with residual {res:.3e}"
            )));
        }
        let (gv, hv) = prob.comp_values(&s.w, x)?;
        let comp = (0..m)
            .map(|i| (gv[i] * hv[i] - tau).abs())
            .fold(0.0, f64::max);
        stats.taus.push(tau);
        stats.residuals.push(res);
        stats.comp_residuals.push(comp);
        stats.inner_iterations.push(iters);
    }
    Ok((s.mpcc_point(), stats))
}

/// SQPCC from `z0`; if that fails, a Scholtes homotopy from `z0` followed by
/// SQPCC polishing.
pub fn solve_mpcc(
    prob: &MpccProblem,
    x: &DVector<f64>,
    z0: &PrimalDualPoint,
    opts: &SqpccOptions,
) -> Result<(PrimalDualPoint, SolveStats)> {
    match sqpcc_solve(prob, x, z0, opts) {
        Ok(r) => Ok(r),
        Err(first) => {
            let (zs, _) =
                scholtes_solve(prob, x, z0, &ScholtesOptions::default()).map_err(|_| first)?;
            sqpcc_solve(prob, x, &zs, opts)
        }
    }
}
