use hympc::exprgraph::{Expr, VecFunc};
use hympc::model::{classify_stationarity, MpccProblem, StationarityClass};
use hympc::qp::{solve_qp, QpData, QpOptions, QpStatus};
use hympc::registry;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

const NV: usize = 3;

fn leaf() -> impl Strategy<Value = Expr> {
    prop_oneof![
        (0..NV).prop_map(Expr::var),
        Just(Expr::param(0)),
        (-2.0..2.0f64).prop_map(Expr::constant),
    ]
}

fn expr() -> impl Strategy<Value = Expr> {
    leaf().prop_recursive(4, 24, 3, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 1..4).prop_map(Expr::sum),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| a * b),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| a - b),
            inner.clone().prop_map(|a| a.sin()),
            inner.clone().prop_map(|a| a.cos()),
            (inner.clone(), 2..4i32).prop_map(|(a, k)| a.powi(k)),
            inner.clone().prop_map(|a| -a),
            (inner.clone(), inner, -1.5..1.5f64, -1.5..1.5f64)
                .prop_map(|(a, b, ca, cb)| Expr::affine(0.3, vec![ca, cb], vec![a, b])),
        ]
    })
}

fn point() -> impl Strategy<Value = (Vec<f64>, f64)> {
    (prop::collection::vec(-1.5..1.5f64, NV), -1.0..1.0f64)
}

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0..1.0f64, rows * cols)
        .prop_map(move |v| DMatrix::from_row_slice(rows, cols, &v))
}

fn vecs(n: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-1.0..1.0f64, n).prop_map(DVector::from_vec)
}

/// Feasible convex QP: strictly convex Hessian, constraints satisfied at a random point.
fn convex_qp() -> impl Strategy<Value = QpData> {
    (1..6usize, 0..3usize, 0..7usize)
        .prop_flat_map(|(n, me, mi)| {
            let me = me.min(n - 1);
            (
                mat(n, n),
                vecs(n),
                mat(me, n),
                mat(mi, n),
                vecs(n),
                prop::collection::vec(0.0..1.0f64, mi),
            )
        })
        .prop_map(|(l, q, a_eq, a_in, d0, slack)| {
            let n = q.len();
            let q_mat = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
            let b_eq = -(&a_eq * &d0);
            let b_in = -(&a_in * &d0) - DVector::from_vec(slack);
            QpData {
                q_mat,
                q,
                a_eq,
                b_eq,
                a_in,
                b_in,
            }
        })
}

/// Inequality-only QP made infeasible by a row that is a negative combination
/// of the others with a right-hand side too large to satisfy.
fn infeasible_qp() -> impl Strategy<Value = QpData> {
    (1..5usize, 1..5usize)
        .prop_flat_map(|(n, k)| {
            (
                mat(k, n),
                vecs(n),
                prop::collection::vec(0.2..1.0f64, k),
                0.1..2.0f64,
            )
        })
        .prop_map(|(a, d0, alpha, gap)| {
            let (k, n) = a.shape();
            let b = -(&a * &d0);
            let alpha = DVector::from_vec(alpha);
            let mut a_in = DMatrix::zeros(k + 1, n);
            let mut b_in = DVector::zeros(k + 1);
            a_in.rows_mut(0, k).copy_from(&a);
            b_in.rows_mut(0, k).copy_from(&b);
            a_in.row_mut(k)
                .copy_from(&(-(a.transpose() * &alpha)).transpose());
            b_in[k] = -alpha.dot(&b) + gap;
            QpData {
                q_mat: DMatrix::identity(n, n),
                q: DVector::zeros(n),
                a_eq: DMatrix::zeros(0, n),
                b_eq: DVector::zeros(0),
                a_in,
                b_in,
            }
        })
}

fn sign(v: f64, tol: f64) -> i8 {
    if v > tol {
        1
    } else if v < -tol {
        -1
    } else {
        0
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gradient_matches_central_differences(e in expr(), (w, x) in point()) {
        let f = VecFunc::new(vec![e.clone()], NV, 1).unwrap();
        let wv = DVector::from_vec(w.clone());
        let xv = DVector::from_vec(vec![x]);
        let val = f.eval(&wv, &xv).unwrap()[0];
        prop_assert!((val - e.eval(&w, &[x])).abs() <= 1e-12 * (1.0 + val.abs()));
        let jac = f.jacobian(&wv, &xv).unwrap();
        let h = 1e-6;
        for j in 0..NV {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[j] += h;
            wm[j] -= h;
            let fd = (e.eval(&wp, &[x]) - e.eval(&wm, &[x])) / (2.0 * h);
            let scale = 1.0 + fd.abs().max(jac[(0, j)].abs());
            prop_assert!((fd - jac[(0, j)]).abs() <= 1e-5 * scale, "d/dw{}: ad {} fd {}", j, jac[(0, j)], fd);
        }
    }

    #[test]
    fn hessian_is_symmetric_and_matches_gradient_differences(e in expr(), (w, x) in point()) {
        let f = VecFunc::new(vec![e], NV, 1).unwrap();
        let wv = DVector::from_vec(w);
        let xv = DVector::from_vec(vec![x]);
        let hess = f.weighted_hessian(&DVector::from_element(1, 1.0), &wv, &xv).unwrap();
        prop_assert_eq!(&hess, &hess.transpose());
        let h = 1e-6;
        for j in 0..NV {
            let (mut wp, mut wm) = (wv.clone(), wv.clone());
            wp[j] += h;
            wm[j] -= h;
            let col = (f.jacobian(&wp, &xv).unwrap() - f.jacobian(&wm, &xv).unwrap()) / (2.0 * h);
            for i in 0..NV {
                let scale = 1.0 + col[(0, i)].abs().max(hess[(i, j)].abs());
                prop_assert!((col[(0, i)] - hess[(i, j)]).abs() <= 1e-4 * scale);
            }
        }
    }

    #[test]
    fn expression_json_round_trip(e in expr(), (w, x) in point()) {
        let json = e.to_json();
        let back = Expr::from_json(&json, NV, 1).unwrap();
        prop_assert_eq!(back.to_json(), json);
        let (a, b) = (e.eval(&w, &[x]), back.eval(&w, &[x]));
        prop_assert!(a == b || (a.is_nan() && b.is_nan()));
    }

    #[test]
    fn convex_qp_satisfies_kkt(data in convex_qp()) {
        let sol = solve_qp(&data, None, &QpOptions::default());
        prop_assert_eq!(sol.status, QpStatus::Optimal);
        let res = data.kkt_residual(&sol.d, &sol.lambda, &sol.mu);
        prop_assert!(res <= 1e-7, "kkt residual {}", res);
        // warm start from the optimal working set returns the same point
        let again = solve_qp(&data, Some(&sol.active_set), &QpOptions::default());
        prop_assert!((&again.d - &sol.d).amax() <= 1e-7);
    }

    #[test]
    fn infeasible_qp_has_farkas_certificate(data in infeasible_qp()) {
        let sol = solve_qp(&data, None, &QpOptions::default());
        prop_assert_eq!(sol.status, QpStatus::Infeasible);
        let y = sol.certificate.expect("certificate");
        prop_assert!(y.iter().all(|&v| v >= -1e-12));
        let scale = y.amax().max(1e-300);
        prop_assert!((data.a_in.transpose() * &y).amax() <= 1e-8 * scale);
        prop_assert!(data.b_in.dot(&y) > 1e-10 * scale);
    }

    #[test]
    fn stationarity_class_follows_sign_rules(
        pairs in prop::collection::vec((prop::sample::select(vec![-1.0, 0.0, 1.0]), prop::sample::select(vec![-1.0, 0.0, 1.0])), 0..6),
    ) {
        let xi: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let nu: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let sg: Vec<(i8, i8)> = pairs.iter().map(|&(a, b)| (sign(a, 0.5), sign(b, 0.5))).collect();
        let s = sg.iter().all(|&(a, b)| a >= 0 && b >= 0);
        let m = sg.iter().all(|&(a, b)| (a > 0 && b > 0) || a == 0 || b == 0);
        let c = sg.iter().all(|&(a, b)| a * b >= 0);
        let aa = sg.iter().all(|&(a, b)| a >= 0 || b >= 0);
        // lattice of the definitions
        prop_assert!(!s || m);
        prop_assert!(!m || (c && aa));
        let expected = if s {
            StationarityClass::S
        } else if m {
            StationarityClass::M
        } else if c {
            StationarityClass::C
        } else if aa {
            StationarityClass::A
        } else {
            StationarityClass::W
        };
        prop_assert_eq!(classify_stationarity(&xi, &nu, 1e-9), expected);
    }

    #[test]
    fn s_stationary_multipliers_stay_s_under_positive_noise(
        base in prop::collection::vec((0.0..2.0f64, 0.0..2.0f64), 1..6),
        noise in prop::collection::vec((0.0..1e-3f64, 0.0..1e-3f64), 6),
    ) {
        let xi: Vec<f64> = base.iter().zip(&noise).map(|(b, n)| b.0 + n.0).collect();
        let nu: Vec<f64> = base.iter().zip(&noise).map(|(b, n)| b.1 + n.1).collect();
        prop_assert_eq!(classify_stationarity(&xi, &nu, 1e-9), StationarityClass::S);
        // one strictly negative pair drops below M but keeps C
        let mut xi2 = xi.clone();
        let mut nu2 = nu.clone();
        xi2[0] = -1.0;
        nu2[0] = -1.0;
        let cls = classify_stationarity(&xi2, &nu2, 1e-9);
        prop_assert_eq!(cls, StationarityClass::C);
    }
}

#[test]
fn registry_problems_json_round_trip() {
    for name in registry::NAMES {
        let prob = registry::get(name).unwrap().problem;
        let json = prob.to_json();
        let back = MpccProblem::from_json(&json).unwrap();
        assert_eq!(back.to_json(), json, "{name}");
        let w = DVector::from_fn(prob.n(), |i, _| 0.3 + 0.1 * i as f64);
        let x = DVector::from_element(prob.n_x(), 0.2);
        let (a, b) = (
            prob.linearize(&w, &x).unwrap(),
            back.linearize(&w, &x).unwrap(),
        );
        assert_eq!(a.h, b.h, "{name}");
        assert_eq!(a.jac_h, b.jac_h, "{name}");
        assert_eq!(a.cg, b.cg, "{name}");
        assert_eq!(
            prob.objective(&w, &x).unwrap(),
            back.objective(&w, &x).unwrap()
        );
    }
}
