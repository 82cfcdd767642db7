//! Real-time hybrid MPC: OCP transcription, a complementarity time-stepping
//! plant, and controllers split into preparation and feedback phases.
//!
//! Stage expressions are written in a local layout
//! `[s (n_s), y (n_y), u (n_u), s_next (n_s), q (n_q)]` with parameter 0
//! standing for the step length. Terminal expressions use `[s (n_s), q (n_q)]`.
//! The transcribed parameter is `x = (s_0, q)`; both are lifted into `w` and
//! reach the problem only through the coupling matrix.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::exprgraph::{evaluation_count, Expr, VecFunc};
use crate::model::{MpccBuilder, MpccProblem, PrimalDualPoint};
use crate::qpcc::{
    build_qpcc, default_branch, qpcc_solve_count, solve_qpcc, HessianMode, QpccBuildOptions,
    QpccData, QpccOptions, QpccStatus,
};
use crate::solver::{scholtes_solve, solve_mpcc, sqpcc_run, ScholtesOptions, SqpccOptions};

#[derive(Clone, Debug)]
pub struct OcpSpec {
    pub name: String,
    pub n_s: usize,
    pub n_y: usize,
    pub n_u: usize,
    pub n_q: usize,
    pub horizon: usize,
    pub dt: f64,
    /// `n_s` implicit rows `phi_f(s, y, u, s_next) = 0`.
    pub dynamics: Vec<Expr>,
    /// Extra algebraic rows `phi_int = 0`.
    pub algebraic: Vec<Expr>,
    pub comp_g: Vec<Expr>,
    pub comp_h: Vec<Expr>,
    /// Path constraints `g <= 0`.
    pub path: Vec<Expr>,
    /// Stage cost as a sum of squares.
    pub stage_residuals: Vec<Expr>,
    pub terminal_residuals: Vec<Expr>,
    /// Terminal equalities `r(s_N, q) = 0`.
    pub terminal: Vec<Expr>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
}

/// Index bookkeeping for a transcribed OCP.
#[derive(Clone, Debug)]
pub struct OcpLayout {
    pub n_s: usize,
    pub n_y: usize,
    pub n_u: usize,
    pub n_q: usize,
    pub horizon: usize,
    pub eq_per_stage: usize,
    pub in_per_stage: usize,
    pub comp_per_stage: usize,
    pub n_terminal: usize,
    /// Control bound rows per stage as `(control index, is_upper)`.
    bound_rows: Vec<(usize, bool)>,
}

impl OcpLayout {
    fn block(&self) -> usize {
        self.n_y + self.n_u + self.n_s
    }
    fn prefix(&self) -> usize {
        self.n_s + self.n_q
    }
    pub fn n(&self) -> usize {
        self.prefix() + self.horizon * self.block()
    }
    pub fn n_x(&self) -> usize {
        self.n_s + self.n_q
    }
    /// First index of state `s_i`, `i = 0..=N`.
    pub fn s(&self, i: usize) -> usize {
        if i == 0 {
            0
        } else {
            self.prefix() + (i - 1) * self.block() + self.n_y + self.n_u
        }
    }
    pub fn q(&self) -> usize {
        self.n_s
    }
    pub fn y(&self, i: usize) -> usize {
        self.prefix() + i * self.block()
    }
    pub fn u(&self, i: usize) -> usize {
        self.prefix() + i * self.block() + self.n_y
    }
    /// First control of the plan.
    pub fn first_control(&self, w: &DVector<f64>) -> DVector<f64> {
        w.rows(self.u(0), self.n_u).into_owned()
    }
    pub fn control(&self, w: &DVector<f64>, i: usize) -> DVector<f64> {
        w.rows(self.u(i.min(self.horizon - 1)), self.n_u)
            .into_owned()
    }
    pub fn parameter(&self, s0: &DVector<f64>, q: &DVector<f64>) -> DVector<f64> {
        let mut x = DVector::zeros(self.n_x());
        x.rows_mut(0, self.n_s).copy_from(s0);
        x.rows_mut(self.n_s, self.n_q).copy_from(q);
        x
    }

    /// Shift the plan one stage forward, duplicating the last stage.
    pub fn shift(&self, z: &PrimalDualPoint) -> PrimalDualPoint {
        let mut out = z.clone();
        let (p, b, nn) = (self.prefix(), self.block(), self.horizon);
        for i in 0..nn {
            let src = (i + 1).min(nn - 1);
            out.w
                .rows_mut(p + i * b, b)
                .copy_from(&z.w.rows(p + src * b, b));
        }
        out.w
            .rows_mut(0, self.n_s)
            .copy_from(&z.w.rows(self.s(1), self.n_s));
        let shift_rows = |v: &DVector<f64>, out: &mut DVector<f64>, start: usize, per: usize| {
            for i in 0..nn {
                let src = (i + 1).min(nn - 1);
                out.rows_mut(start + i * per, per)
                    .copy_from(&v.rows(start + src * per, per));
            }
        };
        shift_rows(&z.lambda, &mut out.lambda, self.prefix(), self.eq_per_stage);
        shift_rows(&z.mu, &mut out.mu, 0, self.in_per_stage);
        shift_rows(&z.xi, &mut out.xi, 0, self.comp_per_stage);
        shift_rows(&z.nu, &mut out.nu, 0, self.comp_per_stage);
        out
    }

    /// Plan with every state equal to `s0`, zero algebraics and controls.
    pub fn initial_guess(
        &self,
        prob: &MpccProblem,
        s0: &DVector<f64>,
        q: &DVector<f64>,
    ) -> PrimalDualPoint {
        let mut z = PrimalDualPoint::zeros(prob);
        for i in 0..=self.horizon {
            z.w.rows_mut(self.s(i), self.n_s).copy_from(s0);
        }
        z.w.rows_mut(self.q(), self.n_q).copy_from(q);
        z
    }
}

fn check_local(what: &str, exprs: &[Expr], n_vars: usize) -> Result<()> {
    for (k, e) in exprs.iter().enumerate() {
        if e.var_dim() > n_vars || e.param_dim() > 1 {
            return Err(Error::Problem(format!(
                "{what}[{k}] uses variables beyond the local layout ({} > {n_vars}) or parameters beyond the step length",
                e.var_dim()
            )));
        }
    }
    Ok(())
}

impl OcpSpec {
    fn local_dim(&self) -> usize {
        2 * self.n_s + self.n_y + self.n_u + self.n_q
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Problem("horizon must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Problem("dt must be positive".into()));
        }
        check_dim("dynamics rows", self.n_s, self.dynamics.len())?;
        check_dim("comp_H rows", self.comp_g.len(), self.comp_h.len())?;
        check_dim("u_min", self.n_u, self.u_min.len())?;
        check_dim("u_max", self.n_u, self.u_max.len())?;
        let nl = self.local_dim();
        check_local("dynamics", &self.dynamics, nl)?;
        check_local("algebraic", &self.algebraic, nl)?;
        check_local("comp_G", &self.comp_g, nl)?;
        check_local("comp_H", &self.comp_h, nl)?;
        check_local("path", &self.path, nl)?;
        check_local("stage_residuals", &self.stage_residuals, nl)?;
        let nt = self.n_s + self.n_q;
        check_local("terminal_residuals", &self.terminal_residuals, nt)?;
        check_local("terminal", &self.terminal, nt)?;
        Ok(())
    }

    pub fn layout(&self) -> OcpLayout {
        let mut bound_rows = Vec::new();
        for j in 0..self.n_u {
            if self.u_max[j].is_finite() {
                bound_rows.push((j, true));
            }
            if self.u_min[j].is_finite() {
                bound_rows.push((j, false));
            }
        }
        OcpLayout {
            n_s: self.n_s,
            n_y: self.n_y,
            n_u: self.n_u,
            n_q: self.n_q,
            horizon: self.horizon,
            eq_per_stage: self.n_s + self.algebraic.len(),
            in_per_stage: self.path.len() + bound_rows.len(),
            comp_per_stage: self.comp_g.len(),
            n_terminal: self.terminal.len(),
            bound_rows,
        }
    }

    /// Stack stages into one parametric MPCC. Row order is stage-major so a
    /// plan can be shifted block by block.
    pub fn transcribe(&self) -> Result<MpccProblem> {
        self.validate()?;
        let lay = self.layout();
        let dt = Expr::constant(self.dt);
        let dtp = |_: usize| dt.clone();
        let (ns, ny, nu) = (self.n_s, self.n_y, self.n_u);
        let stage_map = |i: usize| {
            let lay = lay.clone();
            move |k: usize| -> Expr {
                let g = if k < ns {
                    lay.s(i) + k
                } else if k < ns + ny {
                    lay.y(i) + k - ns
                } else if k < ns + ny + nu {
                    lay.u(i) + k - ns - ny
                } else if k < 2 * ns + ny + nu {
                    lay.s(i + 1) + k - ns - ny - nu
                } else {
                    lay.q() + k - 2 * ns - ny - nu
                };
                Expr::var(g)
            }
        };
        let term_map = |k: usize| -> Expr {
            if k < ns {
                Expr::var(lay.s(lay.horizon) + k)
            } else {
                Expr::var(lay.q() + k - ns)
            }
        };
        let n_x = lay.n_x();
        // lifted parameter rows
        let mut h: Vec<Expr> = (0..n_x).map(Expr::var).collect();
        let mut g = Vec::new();
        let (mut cg, mut ch, mut res) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..self.horizon {
            let map = stage_map(i);
            let sub = |e: &Expr| e.substitute(&map, &dtp);
            h.extend(self.dynamics.iter().map(sub));
            h.extend(self.algebraic.iter().map(sub));
            g.extend(self.path.iter().map(sub));
            for &(j, upper) in &lay.bound_rows {
                let u = Expr::var(lay.u(i) + j);
                g.push(if upper {
                    u - self.u_max[j]
                } else {
                    Expr::constant(self.u_min[j]) - u
                });
            }
            cg.extend(self.comp_g.iter().map(sub));
            ch.extend(self.comp_h.iter().map(sub));
            res.extend(self.stage_residuals.iter().map(sub));
        }
        h.extend(self.terminal.iter().map(|e| e.substitute(&term_map, &dtp)));
        res.extend(
            self.terminal_residuals
                .iter()
                .map(|e| e.substitute(&term_map, &dtp)),
        );
        let mut coupling = DMatrix::zeros(h.len(), n_x);
        for k in 0..n_x {
            coupling[(k, k)] = -1.0;
        }
        let mut b = MpccBuilder::new(&self.name, lay.n(), n_x)
            .equalities(h, coupling)
            .inequalities(g)
            .complementarity(cg, ch);
        b = if res.is_empty() {
            b.objective(Expr::constant(0.0))
        } else {
            b.residuals(res)
        };
        b.build()
    }

    /// One-step system `(dynamics, algebraic, G, H)` over the local layout
    /// with the step length as parameter 0.
    fn step_functions(&self) -> Result<[VecFunc; 3]> {
        let nl = self.local_dim();
        let mut eqs = self.dynamics.clone();
        eqs.extend(self.algebraic.iter().cloned());
        Ok([
            VecFunc::new(eqs, nl, 1)?,
            VecFunc::new(self.comp_g.clone(), nl, 1)?,
            VecFunc::new(self.comp_h.clone(), nl, 1)?,
        ])
    }
}

fn fb(a: f64, b: f64) -> (f64, f64, f64) {
    let r = (a * a + b * b).sqrt();
    if r < 1e-300 {
        let c = 1.0 - std::f64::consts::FRAC_1_SQRT_2;
        (0.0, c, c)
    } else {
        (a + b - r, 1.0 - a / r, 1.0 - b / r)
    }
}

/// Solve one implicit step for the unknowns `(y, s_next)`.
struct StepSystem<'a> {
    ocp: &'a OcpSpec,
    funcs: [VecFunc; 3],
    s: &'a DVector<f64>,
    u: &'a DVector<f64>,
    q: &'a DVector<f64>,
    h: DVector<f64>,
}

const NCP_TOL: f64 = 1e-10;

impl StepSystem<'_> {
    fn n_unknown(&self) -> usize {
        self.ocp.n_y + self.ocp.n_s
    }

    fn local(&self, z: &DVector<f64>) -> DVector<f64> {
        let o = self.ocp;
        let mut v = DVector::zeros(o.local_dim());
        v.rows_mut(0, o.n_s).copy_from(self.s);
        v.rows_mut(o.n_s, o.n_y).copy_from(&z.rows(0, o.n_y));
        v.rows_mut(o.n_s + o.n_y, o.n_u).copy_from(self.u);
        v.rows_mut(o.n_s + o.n_y + o.n_u, o.n_s)
            .copy_from(&z.rows(o.n_y, o.n_s));
        v.rows_mut(2 * o.n_s + o.n_y + o.n_u, o.n_q)
            .copy_from(self.q);
        v
    }

    /// Values and Jacobians (w.r.t. the unknowns) of `E`, `G`, `H`.
    #[allow(clippy::type_complexity)]
    fn eval(&self, z: &DVector<f64>) -> Result<[(DVector<f64>, DMatrix<f64>); 3]> {
        let o = self.ocp;
        let v = self.local(z);
        let cols: Vec<usize> = (o.n_s..o.n_s + o.n_y)
            .chain(o.n_s + o.n_y + o.n_u..2 * o.n_s + o.n_y + o.n_u)
            .collect();
        let mut out: [(DVector<f64>, DMatrix<f64>); 3] = Default::default();
        for (k, f) in self.funcs.iter().enumerate() {
            let val = f.eval(&v, &self.h)?;
            let jac = f.jacobian(&v, &self.h)?.select_columns(cols.iter());
            out[k] = (val, jac);
        }
        Ok(out)
    }

    fn fb_residual(&self, z: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
        let [(e, je), (g, jg), (h, jh)] = self.eval(z)?;
        let (ne, nc, nz) = (e.len(), g.len(), z.len());
        let mut phi = DVector::zeros(ne + nc);
        let mut jac = DMatrix::zeros(ne + nc, nz);
        phi.rows_mut(0, ne).copy_from(&e);
        jac.view_mut((0, 0), (ne, nz)).copy_from(&je);
        let mut nat = e.amax();
        for i in 0..nc {
            let (p, da, db) = fb(g[i], h[i]);
            phi[ne + i] = p;
            let row = jg.row(i) * da + jh.row(i) * db;
            jac.view_mut((ne + i, 0), (1, nz)).copy_from(&row);
            nat = nat.max(g[i].min(h[i]).abs());
        }
        Ok((phi, jac, nat))
    }

    fn semismooth_newton(&self, z0: &DVector<f64>) -> Result<Option<DVector<f64>>> {
        let mut z = z0.clone();
        for _ in 0..60 {
            let (phi, jac, nat) = self.fb_residual(&z)?;
            if nat <= NCP_TOL {
                return Ok(Some(z));
            }
            let Some(d) = jac.lu().solve(&(-&phi)) else {
                return Ok(None);
            };
            let merit = phi.norm_squared();
            let mut t = 1.0;
            loop {
                let cand = &z + &d * t;
                let (p2, _, _) = self.fb_residual(&cand)?;
                if p2.norm_squared() <= (1.0 - 1e-4 * t) * merit || t < 1e-10 {
                    z = cand;
                    break;
                }
                t *= 0.5;
            }
        }
        let (_, _, nat) = self.fb_residual(&z)?;
        Ok((nat <= NCP_TOL).then_some(z))
    }

    /// Newton on the smooth system with one side of every pair pinned.
    fn mode_newton(&self, z0: &DVector<f64>, mode: usize) -> Result<Option<DVector<f64>>> {
        let mut z = z0.clone();
        for _ in 0..50 {
            let [(e, je), (g, jg), (h, jh)] = self.eval(&z)?;
            let (ne, nc, nz) = (e.len(), g.len(), z.len());
            let mut r = DVector::zeros(ne + nc);
            let mut j = DMatrix::zeros(ne + nc, nz);
            r.rows_mut(0, ne).copy_from(&e);
            j.view_mut((0, 0), (ne, nz)).copy_from(&je);
            for i in 0..nc {
                if mode >> i & 1 == 1 {
                    r[ne + i] = g[i];
                    j.view_mut((ne + i, 0), (1, nz)).copy_from(&jg.row(i));
                } else {
                    r[ne + i] = h[i];
                    j.view_mut((ne + i, 0), (1, nz)).copy_from(&jh.row(i));
                }
            }
            if r.amax() <= 0.1 * NCP_TOL {
                let ok = (0..nc).all(|i| g[i] >= -NCP_TOL && h[i] >= -NCP_TOL);
                return Ok(ok.then_some(z));
            }
            let Some(d) = j.lu().solve(&(-r)) else {
                return Ok(None);
            };
            z += d;
            if !z.iter().all(|v| v.is_finite()) {
                return Ok(None);
            }
        }
        Ok(None)
    }
}

/// Advance the plant by `h_sim` using `n_substeps` implicit steps of the
/// OCP's one-step complementarity system. Each substep is solved by
/// semismooth Newton on the Fischer-Burmeister reformulation, with mode
/// enumeration as fallback for at most 8 pairs.
pub fn plant_step(
    ocp: &OcpSpec,
    s: &DVector<f64>,
    u: &DVector<f64>,
    q: &DVector<f64>,
    h_sim: f64,
    n_substeps: usize,
) -> Result<DVector<f64>> {
    check_dim("state", ocp.n_s, s.len())?;
    check_dim("control", ocp.n_u, u.len())?;
    check_dim("q", ocp.n_q, q.len())?;
    if n_substeps == 0 || h_sim.is_nan() || h_sim <= 0.0 {
        return Err(Error::Problem(
            "plant step needs h_sim > 0 and at least one substep".into(),
        ));
    }
    if !s.iter().chain(u.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("plant input".into()));
    }
    let n_eq = ocp.n_s + ocp.algebraic.len() + ocp.comp_g.len();
    check_dim("one-step equations", ocp.n_y + ocp.n_s, n_eq)?;
    let funcs = ocp.step_functions()?;
    let mut state = s.clone();
    let mut y_prev = DVector::zeros(ocp.n_y);
    for _ in 0..n_substeps {
        let sys = StepSystem {
            ocp,
            funcs: funcs.clone(),
            s: &state,
            u,
            q,
            h: DVector::from_element(1, h_sim / n_substeps as f64),
        };
        let mut z0 = DVector::zeros(sys.n_unknown());
        z0.rows_mut(0, ocp.n_y).copy_from(&y_prev);
        z0.rows_mut(ocp.n_y, ocp.n_s).copy_from(&state);
        let mut sol = sys.semismooth_newton(&z0)?;
        if sol.is_none() && ocp.comp_g.len() <= 8 {
            for mode in 0..(1usize << ocp.comp_g.len()) {
                if let Some(z) = sys.mode_newton(&z0, mode)? {
                    sol = Some(z);
                    break;
                }
            }
        }
        let z =
            sol.ok_or_else(|| Error::Failed("plant complementarity step did not converge".into()))?;
        y_prev = z.rows(0, ocp.n_y).into_owned();
        state = z.rows(ocp.n_y, ocp.n_s).into_owned();
    }
    Ok(state)
}

/// 1-DOF mass on a nonlinear spring `k sin(p)`, driven through Coulomb
/// friction by a belt whose velocity `u` is the control.
///
/// Per step, with slip velocity `s = v' - u`, the set-valued friction force
/// `F = la - lb` is encoded by three pairs
/// `0 <= la _|_ gamma + s >= 0`, `0 <= lb _|_ gamma - s >= 0`,
/// `0 <= gamma _|_ F_c - la - lb >= 0`,
/// so slipping forward gives `lb = F_c`, `gamma = s` and sticking gives
/// `gamma = s = 0` with `|la - lb| <= F_c`. In stick the mass follows the
/// belt; large velocity changes saturate the friction force and slip.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrictionDemo {
    pub mass: f64,
    pub friction: f64,
    pub spring: f64,
    pub dt: f64,
    pub horizon: usize,
    pub u_max: f64,
    pub w_pos: f64,
    pub w_vel: f64,
    pub w_u: f64,
    pub w_terminal: f64,
}

impl Default for FrictionDemo {
    fn default() -> Self {
        FrictionDemo {
            mass: 1.0,
            friction: 1.0,
            spring: 0.5,
            dt: 0.1,
            horizon: 10,
            u_max: 2.0,
            w_pos: 10.0,
            w_vel: 0.1,
            w_u: 0.1,
            w_terminal: 20.0,
        }
    }
}

impl FrictionDemo {
    /// Stage cost `w_pos (p - r)^2 + w_vel v^2 + w_u u^2` on the end state.
    pub fn stage_cost(&self, s: &DVector<f64>, u: &DVector<f64>, r: f64) -> f64 {
        self.w_pos * (s[0] - r).powi(2) + self.w_vel * s[1].powi(2) + self.w_u * u[0].powi(2)
    }

    pub fn ocp(&self) -> OcpSpec {
        // local: p 0, v 1, la 2, lb 3, gamma 4, u 5, p' 6, v' 7, r 8; param 0 = dt
        let v = Expr::var;
        let dt = Expr::param(0);
        let force = Expr::affine(
            0.0,
            vec![1.0, -1.0, -self.spring],
            vec![v(2), v(3), v(6).sin()],
        );
        let dyn_v =
            Expr::affine(0.0, vec![self.mass, -self.mass], vec![v(7), v(1)]) - dt.clone() * force;
        let dyn_p = Expr::affine(0.0, vec![1.0, -1.0], vec![v(6), v(0)]) - dt * v(7);
        let sq = f64::sqrt;
        OcpSpec {
            name: "friction_mpc".into(),
            n_s: 2,
            n_y: 3,
            n_u: 1,
            n_q: 1,
            horizon: self.horizon,
            dt: self.dt,
            dynamics: vec![dyn_p, dyn_v],
            algebraic: vec![],
            comp_g: vec![v(2), v(3), v(4)],
            comp_h: vec![
                Expr::linear(0.0, &[(1.0, 4), (1.0, 7), (-1.0, 5)]),
                Expr::linear(0.0, &[(1.0, 4), (-1.0, 7), (1.0, 5)]),
                Expr::linear(self.friction, &[(-1.0, 2), (-1.0, 3)]),
            ],
            path: vec![],
            stage_residuals: vec![
                Expr::linear(0.0, &[(sq(self.w_pos), 6), (-sq(self.w_pos), 8)]),
                Expr::linear(0.0, &[(sq(self.w_vel), 7)]),
                Expr::linear(0.0, &[(sq(self.w_u), 5)]),
            ],
            terminal_residuals: vec![Expr::linear(
                0.0,
                &[(sq(self.w_terminal), 0), (-sq(self.w_terminal), 2)],
            )],
            terminal: vec![],
            u_min: vec![-self.u_max],
            u_max: vec![self.u_max],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Scheme {
    /// One QPCC per sample at the shifted previous plan.
    HyRti,
    /// Converged solve at the predicted state, then a feedback QPCC. With
    /// `branch_qp` the feedback solves only the QP of the prepared branch.
    HyAsc { branch_qp: bool },
    /// `n_as` SQPCC iterations at the predicted state, then a feedback QPCC.
    HyAsRti { n_as: usize },
    /// Full SQPCC solve at every sample (reference controller).
    Converged,
    /// Single-stage smoothing with fixed `tau`.
    Smoothed { tau: f64 },
}

impl Scheme {
    pub fn parse(s: &str, n_as: usize, tau: f64) -> Result<Scheme> {
        Ok(
            match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
                "hyrti" => Scheme::HyRti,
                "hyasc" => Scheme::HyAsc { branch_qp: false },
                "hyascqp" => Scheme::HyAsc { branch_qp: true },
                "hyasrti" => Scheme::HyAsRti { n_as },
                "converged" | "oracle" => Scheme::Converged,
                "smoothed" | "scholtes" => Scheme::Smoothed { tau },
                other => return Err(Error::Parse(format!("unknown scheme `{other}`"))),
            },
        )
    }

    pub fn label(&self) -> String {
        match self {
            Scheme::HyRti => "hyrti".into(),
            Scheme::HyAsc { branch_qp: false } => "hyasc".into(),
            Scheme::HyAsc { branch_qp: true } => "hyasc_qp".into(),
            Scheme::HyAsRti { n_as } => format!("hyasrti{n_as}"),
            Scheme::Converged => "converged".into(),
            Scheme::Smoothed { tau } => format!("smoothed{tau:e}"),
        }
    }

    /// Schemes whose feedback is a single prepared QPCC.
    pub fn is_real_time(&self) -> bool {
        matches!(
            self,
            Scheme::HyRti | Scheme::HyAsc { .. } | Scheme::HyAsRti { .. }
        )
    }
}

#[cfg(not(target_arch = "wasm32"))]
mod clock {
    pub struct Timer(std::time::Instant);
    impl Timer {
        pub fn start() -> Self {
            Timer(std::time::Instant::now())
        }
        pub fn ms(&self) -> f64 {
            self.0.elapsed().as_secs_f64() * 1e3
        }
    }
}

#[cfg(target_arch = "wasm32")]
mod clock {
    pub struct Timer;
    impl Timer {
        pub fn start() -> Self {
            Timer
        }
        pub fn ms(&self) -> f64 {
            0.0
        }
    }
}

pub use clock::Timer;

struct Prepared {
    data: QpccData,
    z_lin: PrimalDualPoint,
    branch: Vec<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeedbackInfo {
    #[serde(with = "crate::serde_dvec")]
    pub u: DVector<f64>,
    pub step_norm: f64,
    pub qpcc_solves: u64,
    pub evaluations: u64,
    pub pivots: usize,
    pub branch: Vec<bool>,
    /// Feedback fell back to the shifted previous plan.
    pub fallback: bool,
}

pub struct Controller {
    pub scheme: Scheme,
    pub layout: OcpLayout,
    pub prob: MpccProblem,
    ocp: OcpSpec,
    z: PrimalDualPoint,
    prepared: Option<Prepared>,
    pub prep_failed: bool,
    pub sqpcc: SqpccOptions,
    pub qpcc: QpccOptions,
    pub last_prep_ms: f64,
    pub last_fb_ms: f64,
}

impl Controller {
    /// Solve the OCP at `(s0, q)` to convergence and prepare the first sample.
    pub fn new(scheme: Scheme, ocp: &OcpSpec, s0: &DVector<f64>, q: &DVector<f64>) -> Result<Self> {
        let prob = ocp.transcribe()?;
        let layout = ocp.layout();
        let x = layout.parameter(s0, q);
        let guess = layout.initial_guess(&prob, s0, q);
        let sqpcc = SqpccOptions {
            tol_stat: 1e-9,
            tol_feas: 1e-9,
            tol_comp: 1e-9,
            ..Default::default()
        };
        let (z, _) = solve_mpcc(&prob, &x, &guess, &sqpcc)?;
        let mut c = Controller {
            scheme,
            layout,
            prob,
            ocp: ocp.clone(),
            z,
            prepared: None,
            prep_failed: false,
            sqpcc,
            qpcc: QpccOptions::default(),
            last_prep_ms: 0.0,
            last_fb_ms: 0.0,
        };
        if scheme.is_real_time() {
            let zl = c.z.clone();
            c.prepare_at(zl, &x)?;
        }
        Ok(c)
    }

    pub fn plan(&self) -> &PrimalDualPoint {
        &self.z
    }

    fn prepare_at(&mut self, z_lin: PrimalDualPoint, x_lin: &DVector<f64>) -> Result<()> {
        let opts = QpccBuildOptions {
            hessian: HessianMode::Exact,
            eps_reg: self.sqpcc.eps_reg,
        };
        let data = build_qpcc(&self.prob, &z_lin, x_lin, &opts)?;
        let branch = default_branch(&data);
        self.prepared = Some(Prepared {
            data,
            z_lin,
            branch,
        });
        Ok(())
    }

    /// Preparation phase for the next sample, given the current state and
    /// the control just applied. `q_next` is the next sample's reference.
    pub fn prepare(
        &mut self,
        s_k: &DVector<f64>,
        u_k: &DVector<f64>,
        q_next: &DVector<f64>,
    ) -> Result<()> {
        let timer = Timer::start();
        let shifted = self.layout.shift(&self.z);
        let res = match self.scheme {
            Scheme::Converged | Scheme::Smoothed { .. } => {
                self.z = shifted;
                Ok(())
            }
            Scheme::HyRti => {
                let s1 = shifted.w.rows(0, self.layout.n_s).into_owned();
                let x_lin = self.layout.parameter(&s1, q_next);
                self.prepare_at(shifted, &x_lin)
            }
            Scheme::HyAsc { .. } | Scheme::HyAsRti { .. } => {
                let pred = plant_step(&self.ocp, s_k, u_k, q_next, self.ocp.dt, 1)?;
                let x_pred = self.layout.parameter(&pred, q_next);
                let solved = match self.scheme {
                    Scheme::HyAsRti { n_as } => {
                        let o = SqpccOptions {
                            max_iter: n_as,
                            ..self.sqpcc.clone()
                        };
                        sqpcc_run(&self.prob, &x_pred, &shifted, &o).map(|r| r.0)
                    }
                    _ => solve_mpcc(&self.prob, &x_pred, &shifted, &self.sqpcc).map(|r| r.0),
                };
                self.prep_failed = solved.is_err();
                let z_lin = solved.unwrap_or(shifted);
                self.prepare_at(z_lin, &x_pred)
            }
        };
        self.last_prep_ms = timer.ms();
        res
    }

    /// Feedback phase: insert the measured state and return the control.
    pub fn feedback(&mut self, s_new: &DVector<f64>, q: &DVector<f64>) -> Result<FeedbackInfo> {
        let x = self.layout.parameter(s_new, q);
        let timer = Timer::start();
        let (e0, c0) = (evaluation_count(), qpcc_solve_count());
        let mut info = FeedbackInfo {
            u: DVector::zeros(self.layout.n_u),
            step_norm: 0.0,
            qpcc_solves: 0,
            evaluations: 0,
            pivots: 0,
            branch: Vec::new(),
            fallback: false,
        };
        match self.scheme {
            Scheme::Converged => {
                let (z, _) = solve_mpcc(&self.prob, &x, &self.z, &self.sqpcc)?;
                self.z = z;
            }
            Scheme::Smoothed { tau } => {
                let o = ScholtesOptions {
                    schedule: vec![tau],
                    ..Default::default()
                };
                // full steps can run into an infeasible linearization; retry
                // from a cold start before giving up on the sample
                let cold = self.layout.initial_guess(&self.prob, s_new, q);
                match scholtes_solve(&self.prob, &x, &self.z, &o)
                    .or_else(|_| scholtes_solve(&self.prob, &x, &cold, &o))
                {
                    Ok((z, _)) => self.z = z,
                    Err(_) => info.fallback = true,
                }
            }
            _ => {
                let prep = self
                    .prepared
                    .as_mut()
                    .ok_or_else(|| Error::Failed("feedback called before prepare".into()))?;
                prep.data.set_parameter(&x)?;
                let opts = QpccOptions {
                    fixed_branch: matches!(self.scheme, Scheme::HyAsc { branch_qp: true }),
                    ..self.qpcc.clone()
                };
                let sol = solve_qpcc(&prep.data, Some(&prep.branch), &opts);
                info.pivots = sol.pivots;
                info.branch = sol.branch.clone();
                if sol.status == QpccStatus::SStationary {
                    info.step_norm = sol.dw.norm();
                    self.z = sol.apply(&prep.z_lin);
                } else {
                    info.fallback = true;
                    self.z = prep.z_lin.clone();
                }
                self.prepared = None;
            }
        }
        info.u = if info.fallback {
            self.layout.control(&self.z.w, 0)
        } else {
            self.layout.first_control(&self.z.w)
        };
        self.last_fb_ms = timer.ms();
        info.evaluations = evaluation_count() - e0;
        info.qpcc_solves = qpcc_solve_count() - c0;
        if info.branch.is_empty() {
            info.branch = self.plan_branch(&x)?;
        }
        Ok(info)
    }

    fn plan_branch(&self, x: &DVector<f64>) -> Result<Vec<bool>> {
        let (g, h) = self.prob.comp_values(&self.z.w, x)?;
        Ok(g.iter().zip(h.iter()).map(|(a, b)| a <= b).collect())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(rename = "T_sim")]
    pub t_sim: f64,
    pub dt: f64,
    /// Piecewise-constant reference as `(time, value)` breakpoints.
    pub reference: Vec<(f64, Vec<f64>)>,
    /// Additive state jumps as `(time, delta)`.
    #[serde(default)]
    pub disturbances: Vec<(f64, Vec<f64>)>,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    /// Plant integrator substeps per sample.
    #[serde(default = "default_substeps")]
    pub plant_substeps: usize,
}

fn default_substeps() -> usize {
    8
}

impl Scenario {
    /// Reference step at t = 0.5, a move back at t = 10 and a velocity kick
    /// at t = 14; 200 samples of 0.1.
    pub fn friction_default() -> Self {
        Scenario {
            t_sim: 20.0,
            dt: 0.1,
            reference: vec![(0.0, vec![0.0]), (0.5, vec![1.0]), (10.0, vec![-0.5])],
            disturbances: vec![(14.0, vec![0.0, 1.5])],
            x0: Some(vec![0.0, 0.0]),
            plant_substeps: 8,
        }
    }

    pub fn samples(&self) -> usize {
        (self.t_sim / self.dt + 1e-9).floor() as usize
    }

    pub fn reference_at(&self, t: f64) -> Result<DVector<f64>> {
        let mut cur = None;
        for (tb, v) in &self.reference {
            if *tb <= t + 1e-12 {
                cur = Some(v);
            }
        }
        cur.or(self.reference.first().map(|p| &p.1))
            .map(|v| DVector::from_column_slice(v))
            .ok_or_else(|| Error::Problem("scenario has no reference".into()))
    }

    pub fn validate(&self, n_s: usize, n_q: usize) -> Result<()> {
        if !(self.t_sim > 0.0 && self.dt > 0.0 && self.t_sim.is_finite()) {
            return Err(Error::Problem("T_sim and dt must be positive".into()));
        }
        for (t, v) in &self.reference {
            check_dim("reference value", n_q, v.len())?;
            if !t.is_finite() || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("reference".into()));
            }
        }
        for (_, d) in &self.disturbances {
            check_dim("disturbance", n_s, d.len())?;
        }
        if let Some(x0) = &self.x0 {
            check_dim("x0", n_s, x0.len())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClosedLoopRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub t_prep_ms: f64,
    pub t_fb_ms: f64,
    pub err_vs_oracle: f64,
    pub comp_residual: f64,
    pub branch_changes: usize,
    pub qpcc_solves: u64,
    pub feedback_evaluations: u64,
    pub pivots: usize,
    pub fallback: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClosedLoopTrace {
    pub scheme: String,
    pub rows: Vec<ClosedLoopRow>,
    pub tracking_cost: f64,
    /// Set when the loop stopped early.
    pub error: Option<String>,
}

impl ClosedLoopTrace {
    pub fn total_branch_changes(&self) -> usize {
        self.rows.iter().map(|r| r.branch_changes).sum()
    }

    pub fn max_feedback_ms(&self) -> f64 {
        self.rows.iter().map(|r| r.t_fb_ms).fold(0.0, f64::max)
    }

    pub fn max_error(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.err_vs_oracle)
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let (nx, nu) = self.rows.first().map_or((0, 0), |r| (r.x.len(), r.u.len()));
        s.push('t');
        for i in 0..nx {
            let _ = write!(s, ",x{i}");
        }
        for i in 0..nu {
            let _ = write!(s, ",u{i}");
        }
        s.push_str(",t_prep_ms,t_fb_ms,err_vs_oracle,comp_residual,branch_changes\n");
        for r in &self.rows {
            let _ = write!(s, "{:.16e}", r.t);
            for v in r.x.iter().chain(r.u.iter()) {
                let _ = write!(s, ",{v:.16e}");
            }
            let _ = writeln!(
                s,
                ",{:.6},{:.6},{:.16e},{:.16e},{}",
                r.t_prep_ms, r.t_fb_ms, r.err_vs_oracle, r.comp_residual, r.branch_changes
            );
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct ClosedLoopOptions {
    /// Solve the converged OCP at every sample to measure the plan error.
    pub oracle_error: bool,
}

impl Default for ClosedLoopOptions {
    fn default() -> Self {
        ClosedLoopOptions { oracle_error: true }
    }
}

/// Run the friction demo in closed loop. The plant integrates with the
/// scenario's substeps, the controller model with one step per interval.
pub fn closed_loop(
    scheme: Scheme,
    demo: &FrictionDemo,
    scenario: &Scenario,
    opts: &ClosedLoopOptions,
) -> Result<ClosedLoopTrace> {
    let ocp = demo.ocp();
    scenario.validate(ocp.n_s, ocp.n_q)?;
    if (scenario.dt - demo.dt).abs() > 1e-12 {
        return Err(Error::Problem(format!(
            "scenario dt {} differs from the controller's {}",
            scenario.dt, demo.dt
        )));
    }
    let mut s = DVector::from_vec(scenario.x0.clone().unwrap_or_else(|| vec![0.0; ocp.n_s]));
    let q0 = scenario.reference_at(0.0)?;
    let mut ctrl = Controller::new(scheme, &ocp, &s, &q0)?;
    let mut trace = ClosedLoopTrace {
        scheme: scheme.label(),
        rows: Vec::new(),
        tracking_cost: 0.0,
        error: None,
    };
    let mut prev_branch: Option<Vec<bool>> = None;
    let mut oracle_z = ctrl.plan().clone();
    let mut prep_ms = 0.0;
    for k in 0..scenario.samples() {
        let t = k as f64 * scenario.dt;
        for (td, d) in &scenario.disturbances {
            if (td - t).abs() < 0.5 * scenario.dt {
                s += DVector::from_column_slice(d);
            }
        }
        let q = scenario.reference_at(t)?;
        let fb = match ctrl.feedback(&s, &q) {
            Ok(f) => f,
            Err(e) => {
                trace.error = Some(format!("feedback at t = {t}: {e}"));
                break;
            }
        };
        let x = ctrl.layout.parameter(&s, &q);
        let (g, h) = ctrl.prob.comp_values(&ctrl.plan().w, &x)?;
        let comp = g
            .iter()
            .zip(h.iter())
            .map(|(a, b)| a.min(*b).abs())
            .fold(0.0, f64::max);
        let err = if opts.oracle_error {
            let warm = if matches!(scheme, Scheme::Converged) {
                ctrl.plan()
            } else {
                &oracle_z
            };
            match solve_mpcc(&ctrl.prob, &x, warm, &ctrl.sqpcc) {
                Ok((zo, _)) => {
                    // primal only: friction multipliers are not unique while sticking
                    let e = (&ctrl.plan().w - &zo.w).amax();
                    oracle_z = ctrl.layout.shift(&zo);
                    e
                }
                Err(_) => f64::NAN,
            }
        } else {
            f64::NAN
        };
        let changes = prev_branch.as_ref().map_or(0, |p| {
            p.iter()
                .zip(fb.branch.iter())
                .filter(|(a, b)| a != b)
                .count()
        });
        prev_branch = Some(fb.branch.clone());
        let s_next = plant_step(&ocp, &s, &fb.u, &q, scenario.dt, scenario.plant_substeps)?;
        trace.tracking_cost += demo.stage_cost(&s_next, &fb.u, q[0]);
        trace.rows.push(ClosedLoopRow {
            t,
            x: s.iter().copied().collect(),
            u: fb.u.iter().copied().collect(),
            t_prep_ms: prep_ms,
            t_fb_ms: ctrl.last_fb_ms,
            err_vs_oracle: err,
            comp_residual: comp,
            branch_changes: changes,
            qpcc_solves: fb.qpcc_solves,
            feedback_evaluations: fb.evaluations,
            pivots: fb.pivots,
            fallback: fb.fallback,
        });
        let q_next = scenario.reference_at(t + scenario.dt)?;
        if let Err(e) = ctrl.prepare(&s, &fb.u, &q_next) {
            trace.error = Some(format!("prepare at t = {t}: {e}"));
            break;
        }
        prep_ms = ctrl.last_prep_ms;
        s = s_next;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn transcription_dimensions() {
        let demo = FrictionDemo::default();
        let ocp = demo.ocp();
        let p = ocp.transcribe().unwrap();
        assert_eq!(p.m(), 30);
        assert_eq!(p.n(), 3 + 6 * 10);
        assert_eq!(p.n_x(), 3);
        assert_eq!(p.m_h(), 3 + 2 * 10);
        assert_eq!(p.m_g(), 20);
        // coupling only in the lifted rows
        let m = p.coupling();
        for r in 0..p.m_h() {
            let nz = (0..3).filter(|&c| m[(r, c)] != 0.0).count();
            assert_eq!(nz, usize::from(r < 3));
        }
    }

    #[test]
    fn smooth_single_stage_is_equality_nlp() {
        // N = 1, no algebraics, no pairs
        let v = Expr::var;
        let ocp = OcpSpec {
            name: "lqr".into(),
            n_s: 1,
            n_y: 0,
            n_u: 1,
            n_q: 0,
            horizon: 1,
            dt: 0.1,
            dynamics: vec![Expr::linear(0.0, &[(1.0, 2), (-1.0, 0), (-0.1, 1)])],
            algebraic: vec![],
            comp_g: vec![],
            comp_h: vec![],
            path: vec![],
            stage_residuals: vec![v(2), v(1)],
            terminal_residuals: vec![],
            terminal: vec![],
            u_min: vec![f64::NEG_INFINITY],
            u_max: vec![f64::INFINITY],
        };
        let p = ocp.transcribe().unwrap();
        assert_eq!((p.m(), p.m_g(), p.m_h()), (0, 0, 2));
    }

    #[test]
    fn inconsistent_stage_dimensions_rejected() {
        let mut ocp = FrictionDemo::default().ocp();
        ocp.dynamics.pop();
        assert!(ocp.transcribe().is_err());
        let mut ocp = FrictionDemo::default().ocp();
        ocp.comp_h.pop();
        assert!(ocp.transcribe().is_err());
    }

    #[test]
    fn plant_stick_and_slip() {
        let ocp = FrictionDemo::default().ocp();
        let q = dv(&[0.0]);
        // small belt speed: friction can supply the acceleration, the mass sticks
        let s = plant_step(&ocp, &dv(&[0.0, 0.0]), &dv(&[0.05]), &q, 0.1, 1).unwrap();
        assert!((s[1] - 0.05).abs() < 1e-10, "{s}");
        // fast belt: slip with friction force +F_c
        let s = plant_step(&ocp, &dv(&[0.0, 0.0]), &dv(&[2.0]), &q, 0.1, 1).unwrap();
        assert!(s[1] > 0.0 && s[1] < 2.0);
        let resid = s[1] - 0.1 * (1.0 - 0.5 * s[0].sin());
        assert!(resid.abs() < 1e-10);
        let s = plant_step(&ocp, &dv(&[0.0, 0.0]), &dv(&[0.0]), &q, 0.1, 8).unwrap();
        assert!(s.amax() < 1e-12);
    }

    #[test]
    fn plant_is_dissipative() {
        let demo = FrictionDemo::default();
        let ocp = demo.ocp();
        let energy =
            |s: &DVector<f64>| 0.5 * demo.mass * s[1].powi(2) + demo.spring * (1.0 - s[0].cos());
        let mut s = dv(&[0.3, 2.0]);
        for _ in 0..40 {
            let n = plant_step(&ocp, &s, &dv(&[0.0]), &dv(&[0.0]), 0.1, 8).unwrap();
            assert!(energy(&n) <= energy(&s) + 1e-12);
            s = n;
        }
        assert!(s[1].abs() < 1e-9);
    }

    #[test]
    fn shift_moves_stages() {
        let ocp = FrictionDemo::default().ocp();
        let lay = ocp.layout();
        let p = ocp.transcribe().unwrap();
        let mut z = PrimalDualPoint::zeros(&p);
        for (i, v) in z.w.iter_mut().enumerate() {
            *v = i as f64;
        }
        let s = lay.shift(&z);
        assert_eq!(s.w[lay.u(0)], z.w[lay.u(1)]);
        assert_eq!(s.w[lay.u(9)], z.w[lay.u(9)]);
        assert_eq!(s.w[0], z.w[lay.s(1)]);
    }

    #[test]
    fn hyrti_fixed_point_and_phase_discipline() {
        let ocp = FrictionDemo::default().ocp();
        let s0 = dv(&[0.0, 0.0]);
        let q = dv(&[1.0]);
        let mut c = Controller::new(Scheme::HyRti, &ocp, &s0, &q).unwrap();
        let fb = c.feedback(&s0, &q).unwrap();
        assert!(fb.step_norm < 1e-6, "{}", fb.step_norm);
        assert_eq!(fb.evaluations, 0);
        assert_eq!(fb.qpcc_solves, 1);
        assert!(fb.u[0] > 0.05, "{}", fb.u[0]);
    }

    #[test]
    fn hyasc_with_exact_prediction() {
        let ocp = FrictionDemo::default().ocp();
        let s0 = dv(&[0.0, 0.0]);
        let q = dv(&[1.0]);
        let mut c = Controller::new(Scheme::HyAsc { branch_qp: false }, &ocp, &s0, &q).unwrap();
        let fb = c.feedback(&s0, &q).unwrap();
        c.prepare(&s0, &fb.u, &q).unwrap();
        // plant with the controller's own integrator
        let s1 = plant_step(&ocp, &s0, &fb.u, &q, ocp.dt, 1).unwrap();
        let fb1 = c.feedback(&s1, &q).unwrap();
        assert!(fb1.step_norm <= 1e-6, "{}", fb1.step_norm);
        let mut oracle = Controller::new(Scheme::Converged, &ocp, &s1, &q).unwrap();
        let fo = oracle.feedback(&s1, &q).unwrap();
        assert!((fo.u[0] - fb1.u[0]).abs() < 1e-6);
    }

    #[test]
    fn scenario_json_round_trip() {
        let s = Scenario::friction_default();
        let txt = serde_json::to_string(&s).unwrap();
        assert!(txt.contains("T_sim"));
        let back: Scenario = serde_json::from_str(&txt).unwrap();
        assert_eq!(back.samples(), 200);
        assert_eq!(back.reference_at(5.0).unwrap()[0], 1.0);
        assert_eq!(back.reference_at(0.2).unwrap()[0], 0.0);
    }
}
