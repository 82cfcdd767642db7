//! Dense strictly convex QP
//!
//! ```text
//! min ½ d'Qd + q'd   s.t.  A_eq d + b_eq = 0,  A_in d + b_in <= 0
//! ```
//!
//! solved by a primal active-set method. Stationarity convention:
//! `Q d + q + A_eq' lambda + A_in' mu = 0` with `mu >= 0`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug)]
pub struct QpData {
    pub q_mat: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
}

impl QpData {
    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn objective(&self, d: &DVector<f64>) -> f64 {
        0.5 * d.dot(&(&self.q_mat * d)) + self.q.dot(d)
    }

    /// Max violation of equalities and inequalities at `d`.
    pub fn infeasibility(&self, d: &DVector<f64>) -> f64 {
        let e = (&self.a_eq * d + &self.b_eq).amax();
        let i = (&self.a_in * d + &self.b_in)
            .iter()
            .fold(0.0f64, |a, &v| a.max(v));
        e.max(i)
    }

    /// Infinity-norm KKT residual of a candidate primal-dual pair.
    pub fn kkt_residual(&self, d: &DVector<f64>, lambda: &DVector<f64>, mu: &DVector<f64>) -> f64 {
        let stat =
            (&self.q_mat * d + &self.q + self.a_eq.tr_mul(lambda) + self.a_in.tr_mul(mu)).amax();
        let slack = &self.a_in * d + &self.b_in;
        let comp = slack
            .iter()
            .zip(mu.iter())
            .map(|(s, m)| (s * m).abs())
            .fold(0.0, f64::max);
        let dual = mu.iter().fold(0.0f64, |a, &m| a.max(-m));
        stat.max(self.infeasibility(d)).max(comp).max(dual)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub d: DVector<f64>,
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
    /// Inequalities in the final working set, ascending.
    pub active_set: Vec<usize>,
    pub status: QpStatus,
    pub iterations: usize,
    /// For infeasible problems: `y = (y_eq, y_in)` with `y_in >= 0`,
    /// `A' y = 0` and `b' y > 0`.
    pub certificate: Option<DVector<f64>>,
}

#[derive(Clone, Debug)]
pub struct QpOptions {
    pub tol_feas: f64,
    pub tol_comp: f64,
    /// Phase-1 violation above which the problem is declared infeasible.
    pub tol_infeasible: f64,
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            tol_feas: 1e-9,
            tol_comp: 1e-9,
            tol_infeasible: 1e-8,
            max_iter: 2000,
        }
    }
}

/// Clip eigenvalues of a symmetric matrix to at least `eps`. Matrices that
/// already satisfy the bound are returned unchanged.
pub fn regularize(q: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let sym = (q + q.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.min() >= eps {
        return sym;
    }
    let clipped = eig.eigenvalues.map(|l| l.max(eps));
    let v = &eig.eigenvectors;
    let r = v * DMatrix::from_diagonal(&clipped) * v.transpose();
    (&r + r.transpose()) * 0.5
}

/// Objective data shared by the equality-constrained subproblems of one solve.
struct Factor {
    q_mat: DMatrix<f64>,
    q: DVector<f64>,
}

impl Factor {
    fn new(q_mat: &DMatrix<f64>, q: &DVector<f64>) -> Factor {
        Factor {
            q_mat: q_mat.clone(),
            q: q.clone(),
        }
    }

    /// Solve the subproblem with rows `rows` of `a` held at equality through
    /// an LU factorization of the full KKT matrix, which stays well posed
    /// when `Q` is only positive definite on the null space of the rows.
    /// Returns `(d, y)` or `None` if the system is numerically singular.
    fn eqp(
        &self,
        a: &DMatrix<f64>,
        rows: &[usize],
        b: &DVector<f64>,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = self.q.len();
        let k = rows.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&self.q_mat);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&self.q));
        for (j, &r) in rows.iter().enumerate() {
            let row = a.row(r);
            kkt.view_mut((n + j, 0), (1, n)).copy_from(&row);
            kkt.view_mut((0, n + j), (n, 1)).copy_from(&row.transpose());
            rhs[n + j] = -b[r];
        }
        let sol = kkt.clone().lu().solve(&rhs)?;
        if !sol.iter().all(|v| v.is_finite()) {
            return None;
        }
        let res = (&kkt * &sol - &rhs).amax();
        let scale = 1.0 + rhs.amax() + kkt.amax() * sol.amax();
        if res > 1e-9 * scale {
            return None;
        }
        Some((sol.rows(0, n).into_owned(), sol.rows(n, k).into_owned()))
    }
}

/// Orthonormal basis of the given rows (Gram-Schmidt, dependent rows skipped).
fn row_basis(a: &DMatrix<f64>, rows: &[usize]) -> Vec<DVector<f64>> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for &r in rows {
        let v = a.row(r).transpose();
        let nrm = v.norm();
        if nrm == 0.0 {
            continue;
        }
        let res = orthogonal_part(&basis, v);
        let rn = res.norm();
        if rn > 1e-10 * nrm {
            basis.push(res / rn);
        }
    }
    basis
}

fn orthogonal_part(basis: &[DVector<f64>], mut v: DVector<f64>) -> DVector<f64> {
    for _ in 0..2 {
        for bv in basis {
            let c = bv.dot(&v);
            v.axpy(-c, bv, 1.0);
        }
    }
    v
}

/// Indices of rows that are linearly independent of the preceding ones.
fn independent_rows(a: &DMatrix<f64>, rows: &[usize], tol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for &r in rows {
        let mut v = a.row(r).transpose();
        let nrm = v.norm();
        if nrm == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for bv in &basis {
                let c = bv.dot(&v);
                v.axpy(-c, bv, 1.0);
            }
        }
        let res = v.norm();
        if res > tol * nrm {
            basis.push(v / res);
            keep.push(r);
        }
    }
    keep
}

struct Core<'a> {
    f: Factor,
    a_all: DMatrix<f64>,
    b_all: DVector<f64>,
    m_eq: usize,
    eq_rows: Vec<usize>,
    opts: &'a QpOptions,
}

struct CoreResult {
    d: DVector<f64>,
    y_all: DVector<f64>,
    working: Vec<usize>,
    status: QpStatus,
    iterations: usize,
}

impl Core<'_> {
    fn new<'a>(data: &QpData, opts: &'a QpOptions) -> Core<'a> {
        let n = data.n();
        let m_eq = data.a_eq.nrows();
        let m_all = m_eq + data.a_in.nrows();
        let mut a_all = DMatrix::zeros(m_all, n);
        a_all.rows_mut(0, m_eq).copy_from(&data.a_eq);
        a_all
            .rows_mut(m_eq, data.a_in.nrows())
            .copy_from(&data.a_in);
        let mut b_all = DVector::zeros(m_all);
        b_all.rows_mut(0, m_eq).copy_from(&data.b_eq);
        b_all
            .rows_mut(m_eq, data.a_in.nrows())
            .copy_from(&data.b_in);
        let f = Factor::new(&data.q_mat, &data.q);
        let all_eq: Vec<usize> = (0..m_eq).collect();
        let eq_rows = independent_rows(&a_all, &all_eq, 1e-10);
        Core {
            f,
            a_all,
            b_all,
            m_eq,
            eq_rows,
            opts,
        }
    }

    fn slack(&self, d: &DVector<f64>, i: usize) -> f64 {
        self.a_all.row(self.m_eq + i).dot(&d.transpose()) + self.b_all[self.m_eq + i]
    }

    fn rows_of(&self, working: &[usize]) -> Vec<usize> {
        let mut rows = self.eq_rows.clone();
        rows.extend(working.iter().map(|&i| self.m_eq + i));
        rows
    }

    /// Primal active-set iterations from a point feasible for the inequalities.
    fn run(&self, mut d: DVector<f64>, mut working: Vec<usize>) -> CoreResult {
        let m_in = self.a_all.nrows() - self.m_eq;
        let mut y_all = DVector::zeros(self.a_all.nrows());
        for it in 1..=self.opts.max_iter {
            let rows = self.rows_of(&working);
            let Some((target, y)) = self.f.eqp(&self.a_all, &rows, &self.b_all) else {
                // numerically dependent working set: drop the newest constraint
                working.pop();
                continue;
            };
            let p = &target - &d;
            let pscale = p.amax();
            let mut cands: Vec<(f64, usize)> = Vec::new();
            if pscale > 0.0 {
                for i in 0..m_in {
                    if working.contains(&i) {
                        continue;
                    }
                    let ap = self.a_all.row(self.m_eq + i).dot(&p.transpose());
                    let row_scale = self.a_all.row(self.m_eq + i).amax().max(1e-300);
                    if ap <= 1e-13 * row_scale * pscale {
                        continue;
                    }
                    let s = self.slack(&d, i);
                    let ai = (-s).max(0.0) / ap;
                    if ai < 1.0 {
                        cands.push((ai, i));
                    }
                }
            }
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            // a row dependent on the working set cannot block in exact
            // arithmetic; skipping it avoids cycling at degenerate vertices
            let mut blocking = None;
            let mut alpha = 1.0;
            if !cands.is_empty() {
                let basis = row_basis(&self.a_all, &rows);
                for &(ai, i) in &cands {
                    let v = self.a_all.row(self.m_eq + i).transpose();
                    let nrm = v.norm();
                    if orthogonal_part(&basis, v).norm() > 1e-9 * nrm {
                        blocking = Some(i);
                        alpha = ai;
                        break;
                    }
                }
            }
            if let Some(i) = blocking {
                d.axpy(alpha, &p, 1.0);
                working.push(i);
                continue;
            }
            d = target;
            y_all.fill(0.0);
            for (k, &r) in rows.iter().enumerate() {
                y_all[r] = y[k];
            }
            // most negative inequality multiplier, smallest index on ties
            let mut drop: Option<(usize, f64)> = None;
            for (pos, &i) in working.iter().enumerate() {
                let mu = y_all[self.m_eq + i];
                if mu < -self.opts.tol_comp {
                    let better = match drop {
                        None => true,
                        Some((p0, m0)) => mu < m0 || (mu == m0 && i < working[p0]),
                    };
                    if better {
                        drop = Some((pos, mu));
                    }
                }
            }
            match drop {
                None => {
                    working.sort_unstable();
                    return CoreResult {
                        d,
                        y_all,
                        working,
                        status: QpStatus::Optimal,
                        iterations: it,
                    };
                }
                Some((pos, _)) => {
                    working.remove(pos);
                }
            }
        }
        working.sort_unstable();
        CoreResult {
            d,
            y_all,
            working,
            status: QpStatus::MaxIter,
            iterations: self.opts.max_iter,
        }
    }
}

/// Phase 1: least-squares violation minimization. Returns the point and
/// whether it is feasible within `tol_infeasible`.
fn phase_one(data: &QpData, opts: &QpOptions) -> (DVector<f64>, bool, DVector<f64>) {
    let n = data.n();
    let m_in = data.a_in.nrows();
    let eps = 1e-10;
    let mut center = DVector::zeros(n);
    let mut sol = DVector::zeros(n);
    for _ in 0..3 {
        let nv = n + m_in;
        let mut q_mat = DMatrix::zeros(nv, nv);
        let ata = data.a_eq.tr_mul(&data.a_eq) + DMatrix::identity(n, n) * eps;
        q_mat.view_mut((0, 0), (n, n)).copy_from(&ata);
        for k in 0..m_in {
            q_mat[(n + k, n + k)] = 1.0;
        }
        let mut q = DVector::zeros(nv);
        q.rows_mut(0, n)
            .copy_from(&(data.a_eq.tr_mul(&data.b_eq) - &center * eps));
        let mut a_in = DMatrix::zeros(m_in, nv);
        a_in.view_mut((0, 0), (m_in, n)).copy_from(&data.a_in);
        for k in 0..m_in {
            a_in[(k, n + k)] = -1.0;
        }
        let sub = QpData {
            q_mat,
            q,
            a_eq: DMatrix::zeros(0, nv),
            b_eq: DVector::zeros(0),
            a_in,
            b_in: data.b_in.clone(),
        };
        let mut v0 = DVector::zeros(nv);
        v0.rows_mut(0, n).copy_from(&center);
        let r0 = &data.a_in * &center + &data.b_in;
        for k in 0..m_in {
            v0[n + k] = r0[k].max(0.0);
        }
        let sub_opts = QpOptions {
            max_iter: opts.max_iter.max(4 * nv + 50),
            ..opts.clone()
        };
        let core = Core::new(&sub, &sub_opts);
        let res = core.run(v0, Vec::new());
        sol = res.d.rows(0, n).into_owned();
        if (&sol - &center).amax() <= 1e-14 * (1.0 + sol.amax()) {
            break;
        }
        center = sol.clone();
    }
    let r_eq = &data.a_eq * &sol + &data.b_eq;
    let r_in = (&data.a_in * &sol + &data.b_in).map(|v| v.max(0.0));
    let scale = data.b_eq.amax().max(data.b_in.amax()).max(1.0);
    let viol = r_eq.amax().max(r_in.amax());
    let mut y = DVector::zeros(r_eq.len() + r_in.len());
    y.rows_mut(0, r_eq.len()).copy_from(&r_eq);
    y.rows_mut(r_eq.len(), r_in.len()).copy_from(&r_in);
    (sol, viol <= opts.tol_infeasible * scale, y)
}

/// Solve a strictly convex QP. A warm working set (inequality indices) is
/// used when the corresponding equality-constrained solution is feasible.
pub fn solve_qp(data: &QpData, warm: Option<&[usize]>, opts: &QpOptions) -> QpSolution {
    let core = Core::new(data, opts);
    let m_in = data.a_in.nrows();
    let feasible = |d: &DVector<f64>| (0..m_in).all(|i| core.slack(d, i) <= opts.tol_feas);
    let mut start: Option<(DVector<f64>, Vec<usize>)> = None;
    if let Some(ws) = warm {
        let mut cand: Vec<usize> = ws.iter().copied().filter(|&i| i < m_in).collect();
        cand.sort_unstable();
        cand.dedup();
        let mut rows = core.eq_rows.clone();
        rows.extend(cand.iter().map(|&i| data.a_eq.nrows() + i));
        let indep = independent_rows(&core.a_all, &rows, 1e-10);
        let working: Vec<usize> = indep
            .into_iter()
            .filter(|&r| r >= data.a_eq.nrows())
            .map(|r| r - data.a_eq.nrows())
            .collect();
        if let Some((d, _)) = core
            .f
            .eqp(&core.a_all, &core.rows_of(&working), &core.b_all)
        {
            if feasible(&d) {
                start = Some((d, working));
            }
        }
    }
    if start.is_none() {
        if let Some((d, _)) = core.f.eqp(&core.a_all, &core.eq_rows, &core.b_all) {
            if feasible(&d) {
                start = Some((d, Vec::new()));
            }
        }
    }
    let start = match start {
        Some(s) => s,
        None => {
            let (d, ok, y) = phase_one(data, opts);
            if !ok {
                return QpSolution {
                    lambda: DVector::zeros(data.a_eq.nrows()),
                    mu: DVector::zeros(m_in),
                    d,
                    active_set: Vec::new(),
                    status: QpStatus::Infeasible,
                    iterations: 0,
                    certificate: Some(y),
                };
            }
            (d, Vec::new())
        }
    };
    let res = core.run(start.0, start.1);
    let m_eq = data.a_eq.nrows();
    let scale = data.b_eq.amax().max(data.b_in.amax()).max(1.0);
    if res.status == QpStatus::Optimal && data.infeasibility(&res.d) > opts.tol_infeasible * scale {
        // equality rows dropped as dependent were inconsistent
        let (d, _, y) = phase_one(data, opts);
        return QpSolution {
            lambda: DVector::zeros(m_eq),
            mu: DVector::zeros(m_in),
            d,
            active_set: Vec::new(),
            status: QpStatus::Infeasible,
            iterations: res.iterations,
            certificate: Some(y),
        };
    }
    QpSolution {
        lambda: res.y_all.rows(0, m_eq).into_owned(),
        mu: res.y_all.rows(m_eq, m_in).into_owned(),
        d: res.d,
        active_set: res.working,
        status: res.status,
        iterations: res.iterations,
        certificate: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }
    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn bound_constrained_scalar() {
        // min ½d² s.t. d >= 1
        let data = QpData {
            q_mat: m(1, 1, &[1.0]),
            q: dv(&[0.0]),
            a_eq: DMatrix::zeros(0, 1),
            b_eq: dv(&[]),
            a_in: m(1, 1, &[-1.0]),
            b_in: dv(&[1.0]),
        };
        let s = solve_qp(&data, None, &QpOptions::default());
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.d[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.mu[0], 1.0, epsilon = 1e-12);
        assert_eq!(s.active_set, vec![0]);
    }

    #[test]
    fn branch_projection() {
        // min (w1-1)² + (w2-1)² with w1 = 0, w2 >= 0 (written as ½d'Qd + q'd)
        let data = QpData {
            q_mat: DMatrix::identity(2, 2) * 2.0,
            q: dv(&[-2.0, -2.0]),
            a_eq: m(1, 2, &[1.0, 0.0]),
            b_eq: dv(&[0.0]),
            a_in: m(1, 2, &[0.0, -1.0]),
            b_in: dv(&[0.0]),
        };
        let s = solve_qp(&data, None, &QpOptions::default());
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.d, dv(&[0.0, 1.0]), epsilon = 1e-12);
        assert_relative_eq!(s.lambda[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn contradictory_constraints_are_infeasible() {
        // d = 1 and d <= 0
        let data = QpData {
            q_mat: m(1, 1, &[1.0]),
            q: dv(&[0.0]),
            a_eq: m(1, 1, &[1.0]),
            b_eq: dv(&[-1.0]),
            a_in: m(1, 1, &[1.0]),
            b_in: dv(&[0.0]),
        };
        let s = solve_qp(&data, None, &QpOptions::default());
        assert_eq!(s.status, QpStatus::Infeasible);
        let y = s.certificate.unwrap();
        assert!(y[1] >= 0.0);
        let a = m(2, 1, &[1.0, 1.0]);
        assert!((a.transpose() * &y).amax() <= 1e-8 * y.norm());
        assert!(dv(&[-1.0, 0.0]).dot(&y) > 0.0);
    }

    #[test]
    fn regularize_clips() {
        assert_eq!(
            regularize(&DMatrix::identity(2, 2), 1e-6),
            DMatrix::identity(2, 2)
        );
        let r = regularize(&DMatrix::from_diagonal(&dv(&[1.0, -1.0])), 1e-6);
        assert_relative_eq!(
            r,
            DMatrix::from_diagonal(&dv(&[1.0, 1e-6])),
            epsilon = 1e-14
        );
    }

    #[test]
    fn duplicated_equalities_are_tolerated() {
        let data = QpData {
            q_mat: DMatrix::identity(2, 2),
            q: dv(&[0.0, 0.0]),
            a_eq: m(2, 2, &[1.0, 1.0, 2.0, 2.0]),
            b_eq: dv(&[-1.0, -2.0]),
            a_in: DMatrix::zeros(0, 2),
            b_in: dv(&[]),
        };
        let s = solve_qp(&data, None, &QpOptions::default());
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.d, dv(&[0.5, 0.5]), epsilon = 1e-12);
        assert!(data.kkt_residual(&s.d, &s.lambda, &s.mu) < 1e-12);
    }

    #[test]
    fn warm_start_from_optimal_set_is_immediate() {
        let data = QpData {
            q_mat: DMatrix::identity(3, 3),
            q: dv(&[1.0, -2.0, 3.0]),
            a_eq: DMatrix::zeros(0, 3),
            b_eq: dv(&[]),
            a_in: DMatrix::from_row_slice(3, 3, &[-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0]),
            b_in: dv(&[0.0, -1.0, 0.0]),
        };
        let cold = solve_qp(&data, None, &QpOptions::default());
        assert_eq!(cold.status, QpStatus::Optimal);
        let warm = solve_qp(&data, Some(&cold.active_set), &QpOptions::default());
        assert!(warm.iterations <= 2);
        assert_relative_eq!(warm.d, cold.d, epsilon = 1e-12);
    }
}
