//! Parametric sensitivity: directional derivatives of the solution map from
//! one QPCC, and detection of solution-map jumps along parameter segments.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{check_pulsc_ulsc, IndexPartition, MpccProblem, PrimalDualPoint, TOL_ACT};
use crate::qpcc::{build_qpcc, HessianMode, QpccBuildOptions, QpccOptions, QpccStatus};
use crate::serde_dvec;
use crate::solver::{
    kkt_residual, scholtes_solve, solve_branch_nlp, sqpcc_solve, ScholtesOptions, SqpccOptions,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DirectionalDerivative {
    #[serde(with = "serde_dvec")]
    pub v: DVector<f64>,
    pub tau_probe: f64,
    /// Direction in primal-dual space: `(z(x + tau v) - z) / tau`.
    pub dz: PrimalDualPoint,
    /// Branch chosen by the probing QPCC.
    pub branch: String,
}

/// Default probe length `1e-4 max(1, ||x||)`.
pub fn default_probe(x: &DVector<f64>) -> f64 {
    1e-4 * x.norm().max(1.0)
}

/// One-sided directional derivative of the solution map at an S-stationary
/// `z_bar`, from the exact-Hessian QPCC linearized at `z_bar` with its
/// parameter moved to `x_bar + tau v`.
pub fn directional_derivative(
    prob: &MpccProblem,
    z_bar: &PrimalDualPoint,
    x_bar: &DVector<f64>,
    v: &DVector<f64>,
    tau_probe: Option<f64>,
) -> Result<DirectionalDerivative> {
    check_dim("direction", prob.n_x(), v.len())?;
    let r = kkt_residual(prob, z_bar, x_bar)?;
    if r > 1e-7 {
        return Err(Error::NotStationary(format!(
            "base point has KKT residual {r:.3e}"
        )));
    }
    let tau = tau_probe.unwrap_or_else(|| default_probe(x_bar));
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Problem("probe length must be positive".into()));
    }
    let opts = QpccBuildOptions {
        hessian: HessianMode::Exact,
        eps_reg: 1e-8,
    };
    let mut data = build_qpcc(prob, z_bar, x_bar, &opts)?;
    data.set_parameter(&(x_bar + v * tau))?;
    let sol = crate::qpcc::solve_qpcc(&data, None, &QpccOptions::default());
    if sol.status != QpccStatus::SStationary {
        return Err(Error::SubproblemInfeasible(format!(
            "probing QPCC returned {:?}; the solution map may jump in this direction",
            sol.status
        )));
    }
    let z_new = sol.apply(z_bar);
    let dz = PrimalDualPoint {
        w: (&z_new.w - &z_bar.w) / tau,
        lambda: (&z_new.lambda - &z_bar.lambda) / tau,
        mu: (&z_new.mu - &z_bar.mu) / tau,
        xi: (&z_new.xi - &z_bar.xi) / tau,
        nu: (&z_new.nu - &z_bar.nu) / tau,
    };
    Ok(DirectionalDerivative {
        v: v.clone(),
        tau_probe: tau,
        dz,
        branch: sol.branch_signature(),
    })
}

#[derive(Clone, Debug)]
pub struct JumpOptions {
    /// Bisection tolerance on the segment fraction.
    pub bisect_tol: f64,
    /// Uniform tracking steps over the segment.
    pub grid: usize,
    /// Pinned-side multipliers below `-tol_sign` on a degenerate pair violate
    /// S-stationarity.
    pub tol_sign: f64,
    /// A violation whose multiplier at the switching point is below
    /// `-jump_threshold` is a jump; otherwise the multiplier crossed zero
    /// continuously and the branch is flipped (kink).
    pub jump_threshold: f64,
    pub sqpcc: SqpccOptions,
}

impl Default for JumpOptions {
    fn default() -> Self {
        JumpOptions {
            bisect_tol: 1e-8,
            grid: 40,
            tol_sign: 1e-9,
            jump_threshold: 1e-6,
            sqpcc: SqpccOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KinkEvent {
    pub tau: f64,
    pub index: usize,
    pub pulsc: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JumpReport {
    pub has_jump: bool,
    pub tau_s: Option<f64>,
    /// Primal jump size `||w(tau_s+) - w(tau_s-)||`.
    pub jump_size: Option<f64>,
    /// Same in the full primal-dual vector.
    pub jump_size_full: Option<f64>,
    pub pre_partition: Option<IndexPartition>,
    pub post_partition: Option<IndexPartition>,
    /// Pair index, pinned side (`G` or `H`) and multiplier value.
    pub violating: Option<(usize, char, f64)>,
    pub kinks: Vec<KinkEvent>,
    pub z_pre: Option<PrimalDualPoint>,
    pub z_post: Option<PrimalDualPoint>,
    /// Point reached at the end of the segment.
    pub z_end: PrimalDualPoint,
}

struct Tracker<'a> {
    prob: &'a MpccProblem,
    x_a: &'a DVector<f64>,
    x_b: &'a DVector<f64>,
    opts: &'a JumpOptions,
}

impl Tracker<'_> {
    fn x_at(&self, tau: f64) -> DVector<f64> {
        self.x_a + (self.x_b - self.x_a) * tau
    }

    fn solve(&self, z: &PrimalDualPoint, branch: &[bool], tau: f64) -> Result<PrimalDualPoint> {
        solve_branch_nlp(self.prob, &self.x_at(tau), z, branch, &self.opts.sqpcc).map(|r| r.0)
    }

    /// Most negative pinned multiplier among pairs whose free side is active.
    fn violation(
        &self,
        z: &PrimalDualPoint,
        branch: &[bool],
        tau: f64,
    ) -> Result<Option<(usize, f64)>> {
        let (g, h) = self.prob.comp_values(&z.w, &self.x_at(tau))?;
        let mut worst: Option<(usize, f64)> = None;
        for (i, &pin_g) in branch.iter().enumerate() {
            let (other, mult) = if pin_g {
                (h[i], z.xi[i])
            } else {
                (g[i], z.nu[i])
            };
            if other <= TOL_ACT && mult < -self.opts.tol_sign && worst.is_none_or(|(_, m)| mult < m)
            {
                worst = Some((i, mult));
            }
        }
        Ok(worst)
    }
}

fn branch_from_point(
    prob: &MpccProblem,
    z: &PrimalDualPoint,
    x: &DVector<f64>,
) -> Result<Vec<bool>> {
    let (g, h) = prob.comp_values(&z.w, x)?;
    Ok((0..prob.m())
        .map(|i| {
            if (g[i] - h[i]).abs() > TOL_ACT {
                g[i] < h[i]
            } else {
                // degenerate: pin the side whose multiplier is larger
                z.xi[i] >= z.nu[i]
            }
        })
        .collect())
}

/// Track the branch NLP of `z_a` from `x_a` to `x_b`, flipping branches at
/// kinks, and report the first point where the tracked solution stops being
/// S-stationary with a strictly negative multiplier (a jump).
pub fn detect_jump(
    prob: &MpccProblem,
    x_a: &DVector<f64>,
    x_b: &DVector<f64>,
    z_a: &PrimalDualPoint,
    opts: &JumpOptions,
) -> Result<JumpReport> {
    check_dim("x_a", prob.n_x(), x_a.len())?;
    check_dim("x_b", prob.n_x(), x_b.len())?;
    let mut report = JumpReport {
        has_jump: false,
        tau_s: None,
        jump_size: None,
        jump_size_full: None,
        pre_partition: None,
        post_partition: None,
        violating: None,
        kinks: Vec::new(),
        z_pre: None,
        z_post: None,
        z_end: z_a.clone(),
    };
    if (x_b - x_a).amax() == 0.0 {
        return Ok(report);
    }
    let tr = Tracker {
        prob,
        x_a,
        x_b,
        opts,
    };
    let mut branch = branch_from_point(prob, z_a, x_a)?;
    let mut z = tr.solve(z_a, &branch, 0.0)?;
    let mut tau = 0.0;
    let step = 1.0 / opts.grid.max(1) as f64;
    let mut jumps = 0;
    while tau < 1.0 {
        let t_next = (tau + step).min(1.0);
        let z_next = tr.solve(&z, &branch, t_next)?;
        if tr.violation(&z_next, &branch, t_next)?.is_none() {
            z = z_next;
            tau = t_next;
            continue;
        }
        // bisect on the violation predicate
        let (mut lo, mut hi) = (tau, t_next);
        let (mut z_lo, mut z_hi) = (z.clone(), z_next);
        while hi - lo > opts.bisect_tol {
            let mid = 0.5 * (lo + hi);
            let zm = tr.solve(&z_lo, &branch, mid)?;
            if tr.violation(&zm, &branch, mid)?.is_some() {
                hi = mid;
                z_hi = zm;
            } else {
                lo = mid;
                z_lo = zm;
            }
        }
        let (idx, mult) = tr
            .violation(&z_hi, &branch, hi)?
            .expect("violation persists at the right end of the bracket");
        if mult > -opts.jump_threshold {
            // multiplier crossed zero on a degenerate pair: flip and go on
            let xl = tr.x_at(lo);
            let (g, h) = prob.comp_values(&z_lo.w, &xl)?;
            let part = IndexPartition::from_values(&g, &h, 1e-6);
            let (pulsc, _) = check_pulsc_ulsc(&z_lo, &part, 1e-9);
            report.kinks.push(KinkEvent {
                tau: hi,
                index: idx,
                pulsc,
            });
            branch[idx] = !branch[idx];
            z = tr.solve(&z_hi, &branch, hi)?;
            tau = hi;
            continue;
        }
        jumps += 1;
        if jumps > 1 {
            return Err(Error::Failed(format!(
                "second switching point at tau = {hi:.9}; the segment crosses more than one boundary"
            )));
        }
        let x_hi = tr.x_at(hi);
        let (zs, _) = scholtes_solve(prob, &x_hi, &z_hi, &ScholtesOptions::default())?;
        let (z_post, _) = sqpcc_solve(prob, &x_hi, &zs, &opts.sqpcc)?;
        let post_branch = branch_from_point(prob, &z_post, &x_hi)?;
        let z_post = tr.solve(&z_post, &post_branch, hi)?;
        let part = |zz: &PrimalDualPoint, t: f64| -> Result<IndexPartition> {
            let (g, h) = prob.comp_values(&zz.w, &tr.x_at(t))?;
            Ok(IndexPartition::from_values(&g, &h, 1e-6))
        };
        report.has_jump = true;
        report.tau_s = Some(0.5 * (lo + hi));
        report.jump_size = Some((&z_post.w - &z_lo.w).norm());
        report.jump_size_full = Some(z_post.distance(&z_lo));
        report.pre_partition = Some(part(&z_lo, lo)?);
        report.post_partition = Some(part(&z_post, hi)?);
        report.violating = Some((idx, if branch[idx] { 'G' } else { 'H' }, mult));
        report.z_pre = Some(z_lo);
        report.z_post = Some(z_post.clone());
        branch = post_branch;
        z = z_post;
        tau = hi;
    }
    report.z_end = z;
    Ok(report)
}
