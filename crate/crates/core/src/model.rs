//! Parametric MPCC
//!
//! ```text
//! min_w  f(w)
//! s.t.   h(w) + M x = 0,   g(w) <= 0,   0 <= G(w) _|_ H(w) >= 0
//! ```
//!
//! with Lagrangian `L = f + lambda'(h + M x) + mu'g - xi'G - nu'H`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{check_dim, Error, Result};
use crate::exprgraph::{Expr, VecFunc};
use crate::qp::{solve_qp, QpData, QpOptions, QpStatus};
use crate::serde_dvec;

/// Default activity tolerance for index classification.
pub const TOL_ACT: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct MpccProblem {
    pub name: String,
    f: VecFunc,
    residuals: Option<VecFunc>,
    h: VecFunc,
    g: VecFunc,
    comp_g: VecFunc,
    comp_h: VecFunc,
    coupling: DMatrix<f64>,
    n: usize,
    n_x: usize,
}

/// Collects expressions before they are compiled into an [`MpccProblem`].
#[derive(Clone, Debug)]
pub struct MpccBuilder {
    name: String,
    n: usize,
    n_x: usize,
    objective: Option<Expr>,
    residuals: Option<Vec<Expr>>,
    equalities: Vec<Expr>,
    coupling: Option<DMatrix<f64>>,
    inequalities: Vec<Expr>,
    comp_g: Vec<Expr>,
    comp_h: Vec<Expr>,
}

impl MpccBuilder {
    pub fn new(name: &str, n: usize, n_x: usize) -> Self {
        MpccBuilder {
            name: name.to_string(),
            n,
            n_x,
            objective: None,
            residuals: None,
            equalities: Vec::new(),
            coupling: None,
            inequalities: Vec::new(),
            comp_g: Vec::new(),
            comp_h: Vec::new(),
        }
    }

    pub fn objective(mut self, f: Expr) -> Self {
        self.objective = Some(f);
        self
    }

    /// Least-squares objective `sum r_i^2`. Enables the Gauss-Newton Hessian.
    pub fn residuals(mut self, r: Vec<Expr>) -> Self {
        self.residuals = Some(r);
        self
    }

    /// Equalities `h(w) + coupling * x = 0`.
    pub fn equalities(mut self, h: Vec<Expr>, coupling: DMatrix<f64>) -> Self {
        self.equalities = h;
        self.coupling = Some(coupling);
        self
    }

    /// Inequalities `g(w) <= 0`.
    pub fn inequalities(mut self, g: Vec<Expr>) -> Self {
        self.inequalities = g;
        self
    }

    pub fn complementarity(mut self, g: Vec<Expr>, h: Vec<Expr>) -> Self {
        self.comp_g = g;
        self.comp_h = h;
        self
    }

    pub fn build(self) -> Result<MpccProblem> {
        let (n, nx) = (self.n, self.n_x);
        let objective = match (&self.objective, &self.residuals) {
            (Some(f), _) => f.clone(),
            (None, Some(r)) => Expr::sum(r.iter().map(|e| e.powi(2)).collect()),
            (None, None) => Expr::constant(0.0),
        };
        let coupling = self
            .coupling
            .unwrap_or_else(|| DMatrix::zeros(self.equalities.len(), nx));
        if coupling.nrows() != self.equalities.len() || coupling.ncols() != nx {
            return Err(Error::Problem(format!(
                "M has shape {}x{}, expected {}x{}",
                coupling.nrows(),
                coupling.ncols(),
                self.equalities.len(),
                nx
            )));
        }
        if self.comp_g.len() != self.comp_h.len() {
            return Err(Error::Problem(format!(
                "{} G functions but {} H functions",
                self.comp_g.len(),
                self.comp_h.len()
            )));
        }
        Ok(MpccProblem {
            name: self.name,
            f: VecFunc::new(vec![objective], n, nx)?,
            residuals: match self.residuals {
                Some(r) => Some(VecFunc::new(r, n, nx)?),
                None => None,
            },
            h: VecFunc::new(self.equalities, n, nx)?,
            g: VecFunc::new(self.inequalities, n, nx)?,
            comp_g: VecFunc::new(self.comp_g, n, nx)?,
            comp_h: VecFunc::new(self.comp_h, n, nx)?,
            coupling,
            n,
            n_x: nx,
        })
    }
}

/// Function values and first derivatives at one point. `h` excludes `M x`.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub f: f64,
    pub grad_f: DVector<f64>,
    pub h: DVector<f64>,
    pub jac_h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub jac_g: DMatrix<f64>,
    pub cg: DVector<f64>,
    pub jac_cg: DMatrix<f64>,
    pub ch: DVector<f64>,
    pub jac_ch: DMatrix<f64>,
}

impl Linearization {
    /// Gradient of the MPCC Lagrangian.
    pub fn lagrangian_gradient(&self, z: &PrimalDualPoint) -> DVector<f64> {
        &self.grad_f + self.jac_h.tr_mul(&z.lambda) + self.jac_g.tr_mul(&z.mu)
            - self.jac_cg.tr_mul(&z.xi)
            - self.jac_ch.tr_mul(&z.nu)
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|a| a.is_finite())
}

impl MpccProblem {
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn n_x(&self) -> usize {
        self.n_x
    }
    /// Number of complementarity pairs.
    pub fn m(&self) -> usize {
        self.comp_g.len()
    }
    pub fn m_h(&self) -> usize {
        self.h.len()
    }
    pub fn m_g(&self) -> usize {
        self.g.len()
    }
    pub fn coupling(&self) -> &DMatrix<f64> {
        &self.coupling
    }
    pub fn objective_fn(&self) -> &VecFunc {
        &self.f
    }
    pub fn residual_fn(&self) -> Option<&VecFunc> {
        self.residuals.as_ref()
    }
    pub fn equality_fn(&self) -> &VecFunc {
        &self.h
    }
    pub fn inequality_fn(&self) -> &VecFunc {
        &self.g
    }
    pub fn comp_g_fn(&self) -> &VecFunc {
        &self.comp_g
    }
    pub fn comp_h_fn(&self) -> &VecFunc {
        &self.comp_h
    }
    pub fn has_residuals(&self) -> bool {
        self.residuals.is_some()
    }

    fn check_wx(&self, w: &DVector<f64>, x: &DVector<f64>) -> Result<()> {
        check_dim("w", self.n, w.len())?;
        check_dim("x", self.n_x, x.len())
    }

    pub fn objective(&self, w: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        self.check_wx(w, x)?;
        Ok(self.f.eval(w, x)?[0])
    }

    /// Evaluate all functions and Jacobians at `(w, x)`.
    pub fn linearize(&self, w: &DVector<f64>, x: &DVector<f64>) -> Result<Linearization> {
        self.check_wx(w, x)?;
        let lin = Linearization {
            f: self.f.eval(w, x)?[0],
            grad_f: self.f.jacobian(w, x)?.row(0).transpose(),
            h: self.h.eval(w, x)?,
            jac_h: self.h.jacobian(w, x)?,
            g: self.g.eval(w, x)?,
            jac_g: self.g.jacobian(w, x)?,
            cg: self.comp_g.eval(w, x)?,
            jac_cg: self.comp_g.jacobian(w, x)?,
            ch: self.comp_h.eval(w, x)?,
            jac_ch: self.comp_h.jacobian(w, x)?,
        };
        let ok = lin.f.is_finite()
            && all_finite(lin.grad_f.as_slice())
            && all_finite(lin.h.as_slice())
            && all_finite(lin.jac_h.as_slice())
            && all_finite(lin.g.as_slice())
            && all_finite(lin.jac_g.as_slice())
            && all_finite(lin.cg.as_slice())
            && all_finite(lin.jac_cg.as_slice())
            && all_finite(lin.ch.as_slice())
            && all_finite(lin.jac_ch.as_slice());
        if !ok {
            return Err(Error::NonFinite(format!("linearization of {}", self.name)));
        }
        Ok(lin)
    }

    /// Values of `G(w)` and `H(w)`.
    pub fn comp_values(
        &self,
        w: &DVector<f64>,
        x: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check_wx(w, x)?;
        Ok((self.comp_g.eval(w, x)?, self.comp_h.eval(w, x)?))
    }

    /// Hessian of the MPCC Lagrangian in `w`.
    pub fn lagrangian_hessian(
        &self,
        z: &PrimalDualPoint,
        x: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        self.check_point(z)?;
        check_dim("x", self.n_x, x.len())?;
        let w = &z.w;
        let mut hess = DMatrix::zeros(self.n, self.n);
        self.f.accumulate_hessian(&[1.0], w, x, &mut hess);
        self.h
            .accumulate_hessian(z.lambda.as_slice(), w, x, &mut hess);
        self.g.accumulate_hessian(z.mu.as_slice(), w, x, &mut hess);
        let nxi: Vec<f64> = z.xi.iter().map(|v| -v).collect();
        let nnu: Vec<f64> = z.nu.iter().map(|v| -v).collect();
        self.comp_g.accumulate_hessian(&nxi, w, x, &mut hess);
        self.comp_h.accumulate_hessian(&nnu, w, x, &mut hess);
        crate::exprgraph::bump_evaluation_count();
        let hess = crate::exprgraph::symmetrize(hess);
        if !all_finite(hess.as_slice()) {
            return Err(Error::NonFinite("Lagrangian Hessian".into()));
        }
        Ok(hess)
    }

    /// `2 J_r' J_r` for least-squares objectives.
    pub fn gauss_newton_hessian(&self, w: &DVector<f64>, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_wx(w, x)?;
        let r = self.residuals.as_ref().ok_or_else(|| {
            Error::Problem(format!(
                "{} has no least-squares residuals; Gauss-Newton is unavailable",
                self.name
            ))
        })?;
        let j = r.jacobian(w, x)?;
        Ok(j.tr_mul(&j) * 2.0)
    }

    pub fn check_point(&self, z: &PrimalDualPoint) -> Result<()> {
        check_dim("w", self.n, z.w.len())?;
        check_dim("lambda", self.m_h(), z.lambda.len())?;
        check_dim("mu", self.m_g(), z.mu.len())?;
        check_dim("xi", self.m(), z.xi.len())?;
        check_dim("nu", self.m(), z.nu.len())
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Parse("problem must be a JSON object".into()))?;
        let dim = |k: &str| -> Result<usize> {
            obj.get(k)
                .and_then(Value::as_u64)
                .map(|u| u as usize)
                .ok_or_else(|| Error::Parse(format!("missing integer field `{k}`")))
        };
        let n = dim("n")?;
        let nx = dim("n_x")?;
        let list = |k: &str| -> Result<Vec<Expr>> {
            match obj.get(k) {
                None | Some(Value::Null) => Ok(Vec::new()),
                Some(val) => Ok(VecFunc::from_json(val, n, nx)
                    .map_err(|e| Error::Parse(format!("{k}: {e}")))?
                    .outputs()
                    .to_vec()),
            }
        };
        let h = list("equalities")?;
        let coupling = match obj.get("M") {
            None | Some(Value::Null) => DMatrix::zeros(h.len(), nx),
            Some(m) => parse_matrix(m, h.len(), nx)?,
        };
        let name = obj.get("name").and_then(Value::as_str).unwrap_or("problem");
        let mut b = MpccBuilder::new(name, n, nx)
            .equalities(h, coupling)
            .inequalities(list("inequalities")?)
            .complementarity(list("comp_G")?, list("comp_H")?);
        if let Some(f) = obj.get("objective") {
            b = b.objective(
                Expr::from_json(f, n, nx).map_err(|e| Error::Parse(format!("objective: {e}")))?,
            );
        }
        if obj.contains_key("residuals") {
            b = b.residuals(list("residuals")?);
        }
        b.build()
    }

    pub fn to_json(&self) -> Value {
        let mut m = Vec::with_capacity(self.coupling.len());
        for i in 0..self.coupling.nrows() {
            for j in 0..self.coupling.ncols() {
                m.push(self.coupling[(i, j)]);
            }
        }
        let mut v = json!({
            "name": self.name,
            "n": self.n,
            "n_x": self.n_x,
            "objective": self.f.outputs()[0].to_json(),
            "equalities": self.h.to_json(),
            "inequalities": self.g.to_json(),
            "comp_G": self.comp_g.to_json(),
            "comp_H": self.comp_h.to_json(),
            "M": m,
        });
        if let Some(r) = &self.residuals {
            v["residuals"] = r.to_json();
        }
        v
    }
}

fn parse_matrix(v: &Value, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::Parse("`M` must be an array".into()))?;
    let mut flat = Vec::new();
    for item in arr {
        match item {
            Value::Array(row) => {
                for a in row {
                    flat.push(
                        a.as_f64()
                            .ok_or_else(|| Error::Parse("non-numeric entry in `M`".into()))?,
                    );
                }
            }
            other => flat.push(
                other
                    .as_f64()
                    .ok_or_else(|| Error::Parse("non-numeric entry in `M`".into()))?,
            ),
        }
    }
    if flat.len() != rows * cols {
        return Err(Error::Parse(format!(
            "`M` has {} entries, expected {}x{}",
            flat.len(),
            rows,
            cols
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &flat))
}

/// `z = (w, lambda, mu, xi, nu)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimalDualPoint {
    #[serde(with = "serde_dvec")]
    pub w: DVector<f64>,
    #[serde(with = "serde_dvec")]
    pub lambda: DVector<f64>,
    #[serde(with = "serde_dvec")]
    pub mu: DVector<f64>,
    #[serde(with = "serde_dvec")]
    pub xi: DVector<f64>,
    #[serde(with = "serde_dvec")]
    pub nu: DVector<f64>,
}

impl PrimalDualPoint {
    pub fn zeros(prob: &MpccProblem) -> Self {
        Self::from_primal(prob, DVector::zeros(prob.n()))
    }

    /// Primal point with zero multipliers.
    pub fn from_primal(prob: &MpccProblem, w: DVector<f64>) -> Self {
        PrimalDualPoint {
            w,
            lambda: DVector::zeros(prob.m_h()),
            mu: DVector::zeros(prob.m_g()),
            xi: DVector::zeros(prob.m()),
            nu: DVector::zeros(prob.m()),
        }
    }

    /// All components stacked into one vector.
    pub fn stacked(&self) -> DVector<f64> {
        let parts = [&self.w, &self.lambda, &self.mu, &self.xi, &self.nu];
        let len = parts.iter().map(|p| p.len()).sum();
        DVector::from_iterator(len, parts.iter().flat_map(|p| p.iter().copied()))
    }

    /// Euclidean distance on the full primal-dual vector.
    pub fn distance(&self, other: &PrimalDualPoint) -> f64 {
        (self.stacked() - other.stacked()).norm()
    }

    pub fn is_finite(&self) -> bool {
        all_finite(self.stacked().as_slice())
    }
}

/// Complementarity index sets plus a branch choice. `branch[i] == true`
/// means the branch pins `G_i = 0` (index in the set I), otherwise `H_i = 0`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IndexPartition {
    pub i_0plus: Vec<usize>,
    pub i_plus0: Vec<usize>,
    pub i_00: Vec<usize>,
    pub branch: Vec<bool>,
}

impl IndexPartition {
    pub fn m(&self) -> usize {
        self.branch.len()
    }

    /// Partition from known values without feasibility checking. Pairs with
    /// both sides above `tol` are assigned to the side with the smaller value.
    pub fn from_values(gv: &DVector<f64>, hv: &DVector<f64>, tol: f64) -> Self {
        let mut p = IndexPartition {
            i_0plus: Vec::new(),
            i_plus0: Vec::new(),
            i_00: Vec::new(),
            branch: Vec::with_capacity(gv.len()),
        };
        for i in 0..gv.len() {
            let (a, b) = (gv[i], hv[i]);
            if a <= tol && b <= tol {
                p.i_00.push(i);
                p.branch.push(true);
            } else if a <= tol || (b > tol && a <= b) {
                p.i_0plus.push(i);
                p.branch.push(true);
            } else {
                p.i_plus0.push(i);
                p.branch.push(false);
            }
        }
        p
    }

    /// Partition implied by a branch alone (no degenerate indices).
    pub fn from_branch(branch: Vec<bool>) -> Self {
        let mut p = IndexPartition {
            i_0plus: Vec::new(),
            i_plus0: Vec::new(),
            i_00: Vec::new(),
            branch,
        };
        for (i, &b) in p.branch.iter().enumerate() {
            if b {
                p.i_0plus.push(i)
            } else {
                p.i_plus0.push(i)
            }
        }
        p
    }

    /// One character per pair: `G` for I_0+, `H` for I_+0, `D` for I_00.
    pub fn signature(&self) -> String {
        let mut s = vec!['?'; self.m()];
        for &i in &self.i_0plus {
            s[i] = 'G';
        }
        for &i in &self.i_plus0 {
            s[i] = 'H';
        }
        for &i in &self.i_00 {
            s[i] = 'D';
        }
        s.into_iter().collect()
    }

    /// Branch as a string of `G`/`H` (which side is pinned to zero).
    pub fn branch_signature(&self) -> String {
        self.branch
            .iter()
            .map(|&b| if b { 'G' } else { 'H' })
            .collect()
    }

    pub fn is_valid(&self) -> bool {
        let m = self.m();
        let mut seen = vec![0u8; m];
        for &i in self.i_0plus.iter().chain(&self.i_plus0).chain(&self.i_00) {
            if i >= m {
                return false;
            }
            seen[i] += 1;
        }
        seen.iter().all(|&c| c == 1)
            && self.i_0plus.iter().all(|&i| self.branch[i])
            && self.i_plus0.iter().all(|&i| !self.branch[i])
    }
}

/// Classify complementarity indices at `w`. Errors with the worst index when
/// `w` violates complementarity by more than `tol_act`.
pub fn classify_indices(
    prob: &MpccProblem,
    w: &DVector<f64>,
    x: &DVector<f64>,
    tol_act: f64,
) -> Result<IndexPartition> {
    let (gv, hv) = prob.comp_values(w, x)?;
    let mut worst: Option<(usize, f64)> = None;
    for i in 0..gv.len() {
        let viol = gv[i].min(hv[i]).max(0.0).max(-gv[i]).max(-hv[i]);
        if viol > tol_act && worst.is_none_or(|(_, v)| viol > v) {
            worst = Some((i, viol));
        }
    }
    if let Some((i, v)) = worst {
        return Err(Error::Infeasible {
            constraint: format!("complementarity pair {i}"),
            violation: v,
        });
    }
    Ok(IndexPartition::from_values(&gv, &hv, tol_act))
}

/// Which MPCC constraint a row of an NLP view came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowOrigin {
    Equality(usize),
    Inequality(usize),
    CompG(usize),
    CompH(usize),
}

/// Standard NLP `min f s.t. eq(w) + coupling x = 0, ineq(w) <= 0` derived
/// from an MPCC by fixing or relaxing complementarity pairs.
#[derive(Clone, Debug)]
pub struct NlpView {
    pub f: VecFunc,
    pub eq: VecFunc,
    pub coupling: DMatrix<f64>,
    pub ineq: VecFunc,
    pub eq_origin: Vec<RowOrigin>,
    pub ineq_origin: Vec<RowOrigin>,
}

impl NlpView {
    fn assemble(
        prob: &MpccProblem,
        eq_extra: Vec<RowOrigin>,
        ineq_extra: Vec<RowOrigin>,
    ) -> Result<NlpView> {
        let mut eq_origin: Vec<RowOrigin> = (0..prob.m_h()).map(RowOrigin::Equality).collect();
        eq_origin.extend(eq_extra);
        let mut ineq_origin: Vec<RowOrigin> = (0..prob.m_g()).map(RowOrigin::Inequality).collect();
        ineq_origin.extend(ineq_extra);
        let expr = |o: &RowOrigin, negate: bool| -> Expr {
            let e = match *o {
                RowOrigin::Equality(i) => prob.h.outputs()[i].clone(),
                RowOrigin::Inequality(i) => prob.g.outputs()[i].clone(),
                RowOrigin::CompG(i) => prob.comp_g.outputs()[i].clone(),
                RowOrigin::CompH(i) => prob.comp_h.outputs()[i].clone(),
            };
            match (negate, o) {
                (true, RowOrigin::CompG(_) | RowOrigin::CompH(_)) => -e,
                _ => e,
            }
        };
        let eq = eq_origin.iter().map(|o| expr(o, false)).collect();
        let ineq = ineq_origin.iter().map(|o| expr(o, true)).collect();
        let mut coupling = DMatrix::zeros(eq_origin.len(), prob.n_x());
        coupling.rows_mut(0, prob.m_h()).copy_from(prob.coupling());
        Ok(NlpView {
            f: prob.f.clone(),
            eq: VecFunc::new(eq, prob.n(), prob.n_x())?,
            coupling,
            ineq: VecFunc::new(ineq, prob.n(), prob.n_x())?,
            eq_origin,
            ineq_origin,
        })
    }

    /// Map NLP multipliers back to `(lambda, mu, xi, nu)` of the MPCC.
    pub fn mpcc_multipliers(
        &self,
        prob: &MpccProblem,
        lam_eq: &DVector<f64>,
        mu_in: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
        let mut lambda = DVector::zeros(prob.m_h());
        let mut mu = DVector::zeros(prob.m_g());
        let mut xi = DVector::zeros(prob.m());
        let mut nu = DVector::zeros(prob.m());
        for (k, o) in self.eq_origin.iter().enumerate() {
            match *o {
                RowOrigin::Equality(i) => lambda[i] = lam_eq[k],
                RowOrigin::CompG(i) => xi[i] = -lam_eq[k],
                RowOrigin::CompH(i) => nu[i] = -lam_eq[k],
                RowOrigin::Inequality(_) => unreachable!(),
            }
        }
        for (k, o) in self.ineq_origin.iter().enumerate() {
            match *o {
                RowOrigin::Inequality(i) => mu[i] = mu_in[k],
                RowOrigin::CompG(i) => xi[i] = mu_in[k],
                RowOrigin::CompH(i) => nu[i] = mu_in[k],
                RowOrigin::Equality(_) => unreachable!(),
            }
        }
        (lambda, mu, xi, nu)
    }
}

/// Branch NLP: pinned side as equality, the other side as `>= 0`.
pub fn make_branch_nlp(prob: &MpccProblem, part: &IndexPartition) -> Result<NlpView> {
    let mut eq = Vec::new();
    let mut ineq = Vec::new();
    for (i, &pin_g) in part.branch.iter().enumerate() {
        if pin_g {
            eq.push(RowOrigin::CompG(i));
            ineq.push(RowOrigin::CompH(i));
        } else {
            eq.push(RowOrigin::CompH(i));
            ineq.push(RowOrigin::CompG(i));
        }
    }
    NlpView::assemble(prob, eq, ineq)
}

/// Relaxed NLP: nondegenerate pairs pinned, degenerate pairs relaxed to the orthant.
pub fn make_rnlp(prob: &MpccProblem, part: &IndexPartition) -> Result<NlpView> {
    let mut eq = Vec::new();
    let mut ineq = Vec::new();
    for i in 0..part.m() {
        if part.i_0plus.contains(&i) {
            eq.push(RowOrigin::CompG(i));
            ineq.push(RowOrigin::CompH(i));
        } else if part.i_plus0.contains(&i) {
            eq.push(RowOrigin::CompH(i));
            ineq.push(RowOrigin::CompG(i));
        } else {
            ineq.push(RowOrigin::CompG(i));
            ineq.push(RowOrigin::CompH(i));
        }
    }
    NlpView::assemble(prob, eq, ineq)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StationarityClass {
    None,
    W,
    A,
    C,
    M,
    S,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tristate {
    Yes,
    No,
    NotChecked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    pub class: StationarityClass,
    pub is_b_stationary: Tristate,
    pub mpcc_licq: bool,
    pub pulsc: bool,
    pub ulsc: bool,
    /// Projected-Hessian test on the largest subspace containing the strong
    /// critical cone. Sufficient, not necessary.
    pub ssosc_sufficient: bool,
    /// Degenerate indices whose multipliers break S-stationarity.
    pub violating_indices: Vec<usize>,
    pub stationarity_residual: f64,
    pub partition: IndexPartition,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Sign {
    Neg,
    Zero,
    Pos,
}

fn sign_of(a: f64, tol: f64) -> Sign {
    if a < -tol {
        Sign::Neg
    } else if a > tol {
        Sign::Pos
    } else {
        Sign::Zero
    }
}

/// Strongest class (in the order S, M, C, A, W) whose sign rule holds for
/// every degenerate pair.
pub fn classify_stationarity(xi: &[f64], nu: &[f64], tol: f64) -> StationarityClass {
    use Sign::*;
    let pairs: Vec<(Sign, Sign)> = xi
        .iter()
        .zip(nu)
        .map(|(&a, &b)| (sign_of(a, tol), sign_of(b, tol)))
        .collect();
    let s = |&(a, b): &(Sign, Sign)| a != Neg && b != Neg;
    let m = |&(a, b): &(Sign, Sign)| (a == Pos && b == Pos) || a == Zero || b == Zero;
    let c = |&(a, b): &(Sign, Sign)| !matches!((a, b), (Pos, Neg) | (Neg, Pos));
    let aa = |&(a, b): &(Sign, Sign)| a != Neg || b != Neg;
    if pairs.iter().all(s) {
        StationarityClass::S
    } else if pairs.iter().all(m) {
        StationarityClass::M
    } else if pairs.iter().all(c) {
        StationarityClass::C
    } else if pairs.iter().all(aa) {
        StationarityClass::A
    } else {
        StationarityClass::W
    }
}

/// Infinity-norm primal infeasibility of `w` and the name of the worst constraint.
pub fn primal_infeasibility(
    lin: &Linearization,
    coupling: &DMatrix<f64>,
    x: &DVector<f64>,
) -> (f64, String) {
    let mut worst = (0.0, String::from("none"));
    let mut upd = |v: f64, name: String| {
        if v > worst.0 {
            worst = (v, name);
        }
    };
    let hx = &lin.h + coupling * x;
    for (i, v) in hx.iter().enumerate() {
        upd(v.abs(), format!("equality {i}"));
    }
    for (i, v) in lin.g.iter().enumerate() {
        upd(v.max(0.0), format!("inequality {i}"));
    }
    for i in 0..lin.cg.len() {
        let (a, b) = (lin.cg[i], lin.ch[i]);
        upd(
            a.min(b).max(-a).max(-b).max(0.0),
            format!("complementarity pair {i}"),
        );
    }
    worst
}

/// Certify stationarity of `z`: gradient of the Lagrangian, inequality
/// multiplier signs, multipliers vanishing on inactive sides, and the sign
/// class on the degenerate set.
pub fn check_s_stationarity(
    prob: &MpccProblem,
    z: &PrimalDualPoint,
    x: &DVector<f64>,
    tol: f64,
) -> Result<StationarityReport> {
    prob.check_point(z)?;
    let lin = prob.linearize(&z.w, x)?;
    let (viol, name) = primal_infeasibility(&lin, prob.coupling(), x);
    if viol > tol {
        return Err(Error::Infeasible {
            constraint: name,
            violation: viol,
        });
    }
    let part = IndexPartition::from_values(&lin.cg, &lin.ch, tol);
    let grad = lin.lagrangian_gradient(z).amax();
    let mut first_order = grad <= tol;
    for j in 0..prob.m_g() {
        let (mu, g) = (z.mu[j], lin.g[j]);
        if mu < -tol || (mu.abs() > tol && g < -tol) {
            first_order = false;
        }
    }
    for &i in &part.i_plus0 {
        if z.xi[i].abs() > tol {
            first_order = false;
        }
    }
    for &i in &part.i_0plus {
        if z.nu[i].abs() > tol {
            first_order = false;
        }
    }
    let xi00: Vec<f64> = part.i_00.iter().map(|&i| z.xi[i]).collect();
    let nu00: Vec<f64> = part.i_00.iter().map(|&i| z.nu[i]).collect();
    let class = if first_order {
        classify_stationarity(&xi00, &nu00, tol)
    } else {
        StationarityClass::None
    };
    let violating_indices = part
        .i_00
        .iter()
        .copied()
        .filter(|&i| z.xi[i] < -tol || z.nu[i] < -tol)
        .collect();
    let licq = check_mpcc_licq_at(&lin, &part, tol, 1e-8);
    let (pulsc, ulsc) = check_pulsc_ulsc(z, &part, tol);
    let is_b_stationary = if class == StationarityClass::S {
        Tristate::Yes
    } else if class == StationarityClass::None || licq {
        // under MPCC-LICQ B-stationarity coincides with S-stationarity
        Tristate::No
    } else if part.i_00.len() <= 12 {
        if b_stationary_by_enumeration(&lin, &part, tol.max(1e-7)) {
            Tristate::Yes
        } else {
            Tristate::No
        }
    } else {
        Tristate::NotChecked
    };
    let ssosc_sufficient = if class == StationarityClass::None {
        false
    } else {
        let hess = prob.lagrangian_hessian(z, x)?;
        ssosc_sufficient_at(&lin, &hess, z, &part, tol)
    };
    Ok(StationarityReport {
        class,
        is_b_stationary,
        mpcc_licq: licq,
        pulsc,
        ulsc,
        ssosc_sufficient,
        violating_indices,
        stationarity_residual: grad,
        partition: part,
    })
}

fn stack_rows(blocks: &[DMatrix<f64>], n: usize) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut a = DMatrix::zeros(rows, n);
    let mut r = 0;
    for b in blocks {
        a.rows_mut(r, b.nrows()).copy_from(b);
        r += b.nrows();
    }
    a
}

fn select_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    m.select_rows(idx.iter())
}

/// Numerical row rank via column-pivoted QR of the transpose.
pub fn row_rank(a: &DMatrix<f64>, tol_rank: f64) -> usize {
    if a.nrows() == 0 {
        return 0;
    }
    let at = a.transpose();
    let max_norm = (0..at.ncols())
        .map(|j| at.column(j).norm())
        .fold(0.0, f64::max);
    if max_norm == 0.0 {
        return 0;
    }
    let qr = at.col_piv_qr();
    let r = qr.r();
    let k = r.nrows().min(r.ncols());
    (0..k)
        .filter(|&i| r[(i, i)].abs() > tol_rank * max_norm)
        .count()
}

fn licq_matrix(lin: &Linearization, part: &IndexPartition, tol_act: f64) -> DMatrix<f64> {
    let n = lin.grad_f.len();
    let g_act: Vec<usize> = (0..lin.g.len()).filter(|&j| lin.g[j] >= -tol_act).collect();
    let mut gi: Vec<usize> = part.i_0plus.iter().chain(&part.i_00).copied().collect();
    let mut hi: Vec<usize> = part.i_plus0.iter().chain(&part.i_00).copied().collect();
    gi.sort_unstable();
    hi.sort_unstable();
    stack_rows(
        &[
            lin.jac_h.clone(),
            select_rows(&lin.jac_g, &g_act),
            select_rows(&lin.jac_cg, &gi),
            select_rows(&lin.jac_ch, &hi),
        ],
        n,
    )
}

fn check_mpcc_licq_at(
    lin: &Linearization,
    part: &IndexPartition,
    tol_act: f64,
    tol_rank: f64,
) -> bool {
    let a = licq_matrix(lin, part, tol_act);
    a.nrows() <= a.ncols() && row_rank(&a, tol_rank) == a.nrows()
}

/// MPCC-LICQ: gradients of the RNLP equalities and active inequalities are
/// linearly independent.
pub fn check_mpcc_licq(
    prob: &MpccProblem,
    w: &DVector<f64>,
    x: &DVector<f64>,
    part: &IndexPartition,
    tol_rank: f64,
) -> Result<bool> {
    let lin = prob.linearize(w, x)?;
    Ok(check_mpcc_licq_at(&lin, part, TOL_ACT, tol_rank))
}

/// `(pulsc, ulsc)` over the degenerate set of `part`.
pub fn check_pulsc_ulsc(z: &PrimalDualPoint, part: &IndexPartition, tol: f64) -> (bool, bool) {
    let pulsc = part.i_00.iter().all(|&i| z.xi[i] > tol || z.nu[i] > tol);
    let ulsc = part.i_00.iter().all(|&i| z.xi[i] > tol && z.nu[i] > tol);
    (pulsc, ulsc)
}

/// Every branch NLP through the degenerate set admits KKT multipliers.
fn b_stationary_by_enumeration(lin: &Linearization, part: &IndexPartition, tol: f64) -> bool {
    let d = part.i_00.len();
    (0..1usize << d).all(|mask| {
        let mut branch = part.branch.clone();
        for (k, &i) in part.i_00.iter().enumerate() {
            branch[i] = mask & (1 << k) != 0;
        }
        branch_kkt_residual(lin, part, &branch) <= tol
    })
}

/// Smallest stationarity residual of a branch NLP over multipliers with the
/// branch's sign restrictions.
fn branch_kkt_residual(lin: &Linearization, part: &IndexPartition, branch: &[bool]) -> f64 {
    let n = lin.grad_f.len();
    let g_act: Vec<usize> = (0..lin.g.len()).filter(|&j| lin.g[j] >= -TOL_ACT).collect();
    let mut rows: Vec<DMatrix<f64>> = vec![lin.jac_h.clone(), select_rows(&lin.jac_g, &g_act)];
    let mut signed = Vec::new();
    let mut k = lin.jac_h.nrows();
    signed.extend(k..k + g_act.len());
    k += g_act.len();
    for &i in &part.i_0plus {
        rows.push(-select_rows(&lin.jac_cg, &[i]));
        k += 1;
    }
    for &i in &part.i_plus0 {
        rows.push(-select_rows(&lin.jac_ch, &[i]));
        k += 1;
    }
    for &i in &part.i_00 {
        rows.push(-select_rows(&lin.jac_cg, &[i]));
        rows.push(-select_rows(&lin.jac_ch, &[i]));
        // pinned side is free, the other side needs a nonnegative multiplier
        if branch[i] {
            signed.push(k + 1);
        } else {
            signed.push(k);
        }
        k += 2;
    }
    let a = stack_rows(&rows, n);
    let p = a.nrows();
    let q_mat = &a * a.transpose() + DMatrix::identity(p, p) * 1e-12;
    let q = &a * &lin.grad_f;
    let mut a_in = DMatrix::zeros(signed.len(), p);
    for (r, &c) in signed.iter().enumerate() {
        a_in[(r, c)] = -1.0;
    }
    let data = QpData {
        q_mat,
        q,
        a_eq: DMatrix::zeros(0, p),
        b_eq: DVector::zeros(0),
        a_in,
        b_in: DVector::zeros(signed.len()),
    };
    let sol = solve_qp(&data, None, &QpOptions::default());
    if sol.status != QpStatus::Optimal {
        return f64::INFINITY;
    }
    (&lin.grad_f + a.tr_mul(&sol.d)).amax()
}

fn ssosc_sufficient_at(
    lin: &Linearization,
    hess: &DMatrix<f64>,
    z: &PrimalDualPoint,
    part: &IndexPartition,
    tol: f64,
) -> bool {
    let n = lin.grad_f.len();
    let g_strong: Vec<usize> = (0..lin.g.len()).filter(|&j| z.mu[j] > tol).collect();
    let mut gi: Vec<usize> = part.i_0plus.clone();
    let mut hi: Vec<usize> = part.i_plus0.clone();
    for &i in &part.i_00 {
        if z.xi[i].abs() > tol {
            gi.push(i);
        }
        if z.nu[i].abs() > tol {
            hi.push(i);
        }
    }
    gi.sort_unstable();
    hi.sort_unstable();
    let a = stack_rows(
        &[
            lin.jac_h.clone(),
            select_rows(&lin.jac_g, &g_strong),
            select_rows(&lin.jac_cg, &gi),
            select_rows(&lin.jac_ch, &hi),
        ],
        n,
    );
    let basis = null_space(&a, 1e-10);
    if basis.ncols() == 0 {
        return true;
    }
    let reduced = basis.tr_mul(&(hess * &basis));
    let eig = nalgebra::SymmetricEigen::new(crate::exprgraph::symmetrize(reduced));
    eig.eigenvalues.min() > tol
}

/// Orthonormal basis of the null space of `a` (columns).
pub fn null_space(a: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = a.ncols();
    if a.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    let ata = a.tr_mul(a);
    let scale = ata.amax().max(1.0);
    let eig = nalgebra::SymmetricEigen::new(ata);
    let cols: Vec<usize> = (0..n)
        .filter(|&j| eig.eigenvalues[j].abs() <= tol * scale)
        .collect();
    eig.eigenvectors.select_columns(cols.iter())
}
