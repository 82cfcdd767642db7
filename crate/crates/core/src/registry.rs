//! Built-in example problems and their reference solutions.
//!
//! Examples with a scalar parameter `p` that enters the objective lift it
//! into the last variable (`w_last - p = 0`), so the parameter reaches every
//! problem only through the coupling matrix `M`.

use nalgebra::{DMatrix, DVector};

use crate::exprgraph::Expr;
use crate::model::{MpccBuilder, MpccProblem, PrimalDualPoint};

pub const NAMES: [&str; 6] = [
    "tutorial21",
    "pulsc2d",
    "jump2d",
    "scheel10",
    "nlcurve",
    "friction_mpc",
];

pub struct Example {
    pub name: &'static str,
    pub problem: MpccProblem,
    /// Parameter range the example is studied on (first parameter component).
    pub domain: (f64, f64),
    /// Closed-form reference solution for scalar-parameter examples.
    pub reference: Option<fn(f64) -> PrimalDualPoint>,
    pub description: &'static str,
}

pub fn get(name: &str) -> Option<Example> {
    let ex = match name {
        "tutorial21" => Example {
            name: "tutorial21",
            problem: tutorial21(),
            domain: (-2.0, 2.0),
            reference: Some(tutorial21_solution),
            description: "7-variable MPCC whose solution map jumps at x = 0",
        },
        "pulsc2d" => Example {
            name: "pulsc2d",
            problem: pulsc2d(),
            domain: (-2.0, 2.0),
            reference: Some(pulsc2d_solution),
            description: "continuous solution map with kinks at p = -1 and p = 1",
        },
        "jump2d" => Example {
            name: "jump2d",
            problem: jump2d(),
            domain: (-2.0, 2.0),
            reference: Some(jump2d_solution),
            description: "branch a tracked until p = 1, where the solution jumps to branch b",
        },
        "scheel10" => Example {
            name: "scheel10",
            problem: scheel10(),
            domain: (-2.0, 2.0),
            reference: Some(scheel10_solution),
            description: "branching at p = 0 (selection (p, 0) for p >= 0)",
        },
        "nlcurve" => Example {
            name: "nlcurve",
            problem: nlcurve(),
            domain: (-1.0, 1.0),
            reference: Some(nlcurve_solution),
            description: "curved least-squares MPCC with a nonzero residual at the solution",
        },
        "friction_mpc" => Example {
            name: "friction_mpc",
            problem: crate::mpc::FrictionDemo::default()
                .ocp()
                .transcribe()
                .ok()?,
            domain: (-1.0, 1.0),
            reference: None,
            description: "stick-slip mass, N = 10, parameter (position, velocity, reference)",
        },
        _ => return None,
    };
    Some(ex)
}

fn lifted_coupling(rows: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, 1);
    m[(0, 0)] = -1.0;
    m
}

fn w(i: usize) -> Expr {
    Expr::var(i)
}

/// `1 + 0.25 t^2 + 0.15 cos(10 t)`
pub fn tutorial21_curve(t: f64) -> f64 {
    1.0 + 0.25 * t * t + 0.15 * (10.0 * t).cos()
}

fn tutorial21_curve_slope(t: f64) -> f64 {
    0.5 * t - 1.5 * (10.0 * t).sin()
}

/// Variables `w_0..w_6`; parameter `x` fixes `w_6`.
pub fn tutorial21() -> MpccProblem {
    let curve = Expr::affine(
        1.0,
        vec![0.25, 0.15],
        vec![w(6).powi(2), Expr::linear(0.0, &[(10.0, 6)]).cos()],
    );
    let mut residuals = vec![(w(0) + 1.5).powi(2)];
    residuals.extend((1..6).map(w));
    let cube = w(6).powi(3);
    let h = vec![
        w(6),
        Expr::affine(0.0, vec![-1.0, -1.0, -1.0], vec![cube.clone(), w(3), w(5)]),
        Expr::affine(0.0, vec![1.0, -1.0, -1.0], vec![cube, w(4), w(5)]),
        Expr::linear(-1.0, &[(1.0, 1), (1.0, 2)]),
    ];
    let g = vec![Expr::affine(
        0.0,
        vec![-1.0, 1.0, 0.5],
        vec![w(0), w(1) * curve, w(2) * w(6).powi(2)],
    )];
    MpccBuilder::new("tutorial21", 7, 1)
        .residuals(residuals)
        .equalities(h, lifted_coupling(4))
        .inequalities(g)
        .complementarity(vec![w(1), w(2)], vec![w(3), w(4)])
        .build()
        .expect("tutorial21 is well formed")
}

/// Closed-form solution with multipliers. For `x > 0` the pinned sides are
/// `w_1 = 1`, `w_3 = 0`, `w_4 = 0`, `w_5 = 2 x^3`.
pub fn tutorial21_solution(x: f64) -> PrimalDualPoint {
    let x3 = x.powi(3);
    let x5 = x.powi(5);
    let dv = |v: &[f64]| DVector::from_row_slice(v);
    if x <= 0.0 {
        let w1 = 0.5 * x * x;
        let mu = 4.0 * (w1 + 1.5).powi(3);
        let lam2 = -4.0 * x3;
        let lam3 = 6.0 * x3;
        let lam4 = -2.0 - 0.5 * mu * x * x;
        let lam1 = -30.0 * x5 - mu * x;
        PrimalDualPoint {
            w: dv(&[w1, 0.0, 1.0, -2.0 * x3, 0.0, x3, x]),
            lambda: dv(&[lam1, lam2, lam3, lam4]),
            mu: dv(&[mu]),
            xi: dv(&[lam4 + mu * tutorial21_curve(x), 0.0]),
            nu: dv(&[0.0, -6.0 * x3]),
        }
    } else {
        let c = tutorial21_curve(x);
        let mu = 4.0 * (c + 1.5).powi(3);
        let lam2 = -6.0 * x3;
        let lam3 = 4.0 * x3;
        let lam4 = -2.0 - mu * c;
        let lam1 = -30.0 * x5 - mu * tutorial21_curve_slope(x);
        PrimalDualPoint {
            w: dv(&[c, 1.0, 0.0, 0.0, 2.0 * x3, -x3, x]),
            lambda: dv(&[lam1, lam2, lam3, lam4]),
            mu: dv(&[mu]),
            xi: dv(&[0.0, lam4 + 0.5 * mu * x * x]),
            nu: dv(&[6.0 * x3, 0.0]),
        }
    }
}

fn two_by_two(name: &str, r0: Expr, r1: Expr) -> MpccProblem {
    MpccBuilder::new(name, 3, 1)
        .residuals(vec![r0, r1])
        .equalities(vec![w(2)], lifted_coupling(1))
        .complementarity(vec![w(0)], vec![w(1)])
        .build()
        .expect("two-variable example is well formed")
}

fn two_by_two_point(w0: f64, w1: f64, p: f64, lam: f64, xi: f64, nu: f64) -> PrimalDualPoint {
    PrimalDualPoint {
        w: DVector::from_row_slice(&[w0, w1, p]),
        lambda: DVector::from_row_slice(&[lam]),
        mu: DVector::zeros(0),
        xi: DVector::from_row_slice(&[xi]),
        nu: DVector::from_row_slice(&[nu]),
    }
}

/// `(w0 - p + 1)^2 + (w1 + p + 1)^2`, `0 <= w0 _|_ w1 >= 0`.
pub fn pulsc2d() -> MpccProblem {
    two_by_two(
        "pulsc2d",
        Expr::linear(1.0, &[(1.0, 0), (-1.0, 2)]),
        Expr::linear(1.0, &[(1.0, 1), (1.0, 2)]),
    )
}

pub fn pulsc2d_solution(p: f64) -> PrimalDualPoint {
    let (w0, w1) = if p < -1.0 {
        (0.0, -p - 1.0)
    } else if p <= 1.0 {
        (0.0, 0.0)
    } else {
        (p - 1.0, 0.0)
    };
    let a = 2.0 * (w0 - p + 1.0);
    let b = 2.0 * (w1 + p + 1.0);
    two_by_two_point(w0, w1, p, a - b, a, b)
}

/// `(w0 - p - 1)^2 + (w1 + p - 1)^2`, `0 <= w0 _|_ w1 >= 0`.
pub fn jump2d() -> MpccProblem {
    two_by_two(
        "jump2d",
        Expr::linear(-1.0, &[(1.0, 0), (-1.0, 2)]),
        Expr::linear(-1.0, &[(1.0, 1), (1.0, 2)]),
    )
}

/// Branch `w0 = 0` for `p < 1`, branch `w1 = 0` from `p = 1` on.
pub fn jump2d_solution(p: f64) -> PrimalDualPoint {
    jump2d_branch_solution(p, p < 1.0)
}

/// Solution of one branch NLP (`branch_a`: `w0 = 0`, otherwise `w1 = 0`).
pub fn jump2d_branch_solution(p: f64, branch_a: bool) -> PrimalDualPoint {
    let (w0, w1) = if branch_a {
        (0.0, (1.0 - p).max(0.0))
    } else {
        ((p + 1.0).max(0.0), 0.0)
    };
    let a = 2.0 * (w0 - p - 1.0);
    let b = 2.0 * (w1 + p - 1.0);
    two_by_two_point(w0, w1, p, a - b, a, b)
}

/// `(w0 - p)^2 + (w1 - p)^2`, `0 <= w0 _|_ w1 >= 0`.
pub fn scheel10() -> MpccProblem {
    two_by_two(
        "scheel10",
        Expr::linear(0.0, &[(1.0, 0), (-1.0, 2)]),
        Expr::linear(0.0, &[(1.0, 1), (-1.0, 2)]),
    )
}

pub fn scheel10_solution(p: f64) -> PrimalDualPoint {
    let (w0, w1) = if p < 0.0 { (0.0, 0.0) } else { (p, 0.0) };
    let a = 2.0 * (w0 - p);
    let b = 2.0 * (w1 - p);
    two_by_two_point(w0, w1, p, a + b, a, b)
}

/// Residuals `w0^2 - 2 + p/2`, `w0 - 1`, `w1 + 1/2` with `0 <= w1 _|_ w0 >= 0`.
/// The solution pins `w1 = 0` and puts `w0` at the positive minimizer of a
/// quartic, so Newton steps see curvature and Gauss-Newton a nonzero residual.
pub fn nlcurve() -> MpccProblem {
    MpccBuilder::new("nlcurve", 3, 1)
        .residuals(vec![
            Expr::affine(-2.0, vec![1.0, 0.5], vec![w(0).powi(2), w(2)]),
            w(0) - 1.0,
            w(1) + 0.5,
        ])
        .equalities(vec![w(2)], lifted_coupling(1))
        .complementarity(vec![w(1)], vec![w(0)])
        .build()
        .expect("nlcurve is well formed")
}

pub fn nlcurve_solution(p: f64) -> PrimalDualPoint {
    let c = 2.0 - 0.5 * p;
    // 4 w^3 + (2 - 4c) w - 2 = 0, positive root by Newton from the right
    let mut w0: f64 = 2.0;
    for _ in 0..100 {
        let f = 4.0 * w0.powi(3) + (2.0 - 4.0 * c) * w0 - 2.0;
        let df = 12.0 * w0 * w0 + 2.0 - 4.0 * c;
        let step = f / df;
        w0 -= step;
        if step.abs() < 1e-16 * w0.abs() {
            break;
        }
    }
    let r0 = w0 * w0 - c;
    two_by_two_point(w0, 0.0, p, -r0, 1.0, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{check_s_stationarity, StationarityClass};

    #[test]
    fn tutorial_objective_at_origin() {
        let p = tutorial21();
        let v = p
            .objective(&DVector::zeros(7), &DVector::from_element(1, 0.0))
            .unwrap();
        assert_eq!(v, 5.0625);
    }

    #[test]
    fn tutorial_constraint_at_printed_point() {
        let p = tutorial21();
        let w = DVector::from_row_slice(&[0.125, 0.0, 1.0, 0.25, 0.0, -0.125, -0.5]);
        let h = p
            .equality_fn()
            .eval(&w, &DVector::from_element(1, -0.5))
            .unwrap();
        assert!(h[1].abs() < 1e-15);
        assert!(h[3].abs() < 1e-15);
    }

    #[test]
    fn closed_forms_are_s_stationary() {
        for (prob, f) in [
            (
                tutorial21(),
                tutorial21_solution as fn(f64) -> PrimalDualPoint,
            ),
            (pulsc2d(), pulsc2d_solution),
            (nlcurve(), nlcurve_solution),
            (jump2d(), jump2d_solution),
            (scheel10(), scheel10_solution),
        ] {
            for k in 0..21 {
                let x = -2.0 + 0.2 * k as f64;
                let z = f(x);
                let xv = DVector::from_element(1, x);
                let rep = check_s_stationarity(&prob, &z, &xv, 1e-9)
                    .unwrap_or_else(|e| panic!("{} at {x}: {e}", prob.name));
                assert_eq!(rep.class, StationarityClass::S, "{} at {x}", prob.name);
            }
        }
    }

    #[test]
    fn printed_positive_branch_is_infeasible() {
        // the printed x > 0 point (w4 = 2x^3, w5 = 0) breaks the pair w2 _|_ w4
        let x: f64 = 0.5;
        let c = tutorial21_curve(x);
        let w = DVector::from_row_slice(&[c, 1.0, 0.0, 2.0 * x.powi(3), 0.0, -x.powi(3), x]);
        let p = tutorial21();
        let (g, h) = p.comp_values(&w, &DVector::from_element(1, x)).unwrap();
        assert!(g[0].min(h[0]) > 0.1);
    }

    #[test]
    fn registry_lookup() {
        for name in NAMES {
            assert!(get(name).is_some(), "{name}");
        }
        assert!(get("nope").is_none());
    }
}
