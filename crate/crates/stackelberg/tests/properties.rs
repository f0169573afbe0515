use proptest::prelude::*;

use stackelberg::formation::{incidence_matrix, triangle_example, weighted_laplacian, Edge, Graph};
use stackelberg::linalg::{self, Mat};
use stackelberg::model::{CoefficientFn, Dims, GameSpec, TimeGrid};
use stackelberg::odesolve::{solve_filter_covariance, solve_terminal_riccati};

fn mat2(v: &[f64]) -> Mat {
    Mat::from_row_slice(2, 2, v)
}

/// M Mᵀ + floor·I.
fn psd(v: &[f64], floor: f64) -> Mat {
    let m = mat2(v);
    &m * m.transpose() + Mat::identity(2, 2) * floor
}

fn graph(vertices: usize, pairs: &[(usize, usize, f64)]) -> (Graph, Vec<f64>) {
    let mut edges = Vec::new();
    let mut w = Vec::new();
    for &(a, b, wt) in pairs {
        let (h, t) = (a % vertices, b % vertices);
        if h == t {
            continue;
        }
        edges.push(Edge {
            head: h,
            tail: t,
            offset: vec![0.0, 0.0],
            weight: wt,
            follower_terminal: None,
            follower_running: None,
            leader_terminal: 0.0,
            leader_running: 0.0,
        });
        w.push(wt);
    }
    (Graph { vertices, edges }, w)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn laplacian_is_psd_with_constant_kernel(
        vertices in 2usize..7,
        pairs in prop::collection::vec((0usize..7, 0usize..7, 0.01f64..5.0), 1..12),
    ) {
        let (g, w) = graph(vertices, &pairs);
        let d = incidence_matrix(&g);
        let l = weighted_laplacian(&d, &w);
        prop_assert!(linalg::asym_residual(&l) <= 1e-12);
        let scale = 1.0 + l.norm();
        prop_assert!(linalg::min_eig(&l) >= -1e-10 * scale);
        let ones = Mat::from_element(vertices, 1, 1.0);
        prop_assert!(linalg::max_abs(&(&l * ones)) <= 1e-10 * scale);
        if g.is_connected() {
            let (_, zero, _) = linalg::inertia(&l, 1e-9);
            prop_assert_eq!(zero, 1);
        }
    }

    #[test]
    fn incidence_columns_sum_to_zero(
        vertices in 2usize..7,
        pairs in prop::collection::vec((0usize..7, 0usize..7, 0.1f64..1.0), 1..10),
    ) {
        let (g, _) = graph(vertices, &pairs);
        let d = incidence_matrix(&g);
        for c in 0..d.ncols() {
            prop_assert_eq!(d.column(c).sum(), 0.0);
            prop_assert_eq!(d.column(c).abs().sum(), 2.0);
        }
    }

    #[test]
    fn kron_mixed_product(
        a in prop::collection::vec(-2.0f64..2.0, 4),
        b in prop::collection::vec(-2.0f64..2.0, 4),
        c in prop::collection::vec(-2.0f64..2.0, 4),
        d in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let (a, b, c, d) = (mat2(&a), mat2(&b), mat2(&c), mat2(&d));
        let lhs = linalg::kron(&a, &b) * linalg::kron(&c, &d);
        let rhs = linalg::kron(&(&a * &c), &(&b * &d));
        prop_assert!(linalg::max_abs(&(lhs - rhs)) <= 1e-12 * 100.0);
    }

    #[test]
    fn definite_riccati_stays_symmetric_psd(
        a in prop::collection::vec(-1.0f64..1.0, 4),
        b in prop::collection::vec(-1.0f64..1.0, 4),
        q in prop::collection::vec(-1.0f64..1.0, 4),
        g in prop::collection::vec(-1.0f64..1.0, 4),
        r in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let grid = TimeGrid::new(1.0, 100);
        let c = |m: Mat| CoefficientFn::constant(m);
        let p = solve_terminal_riccati(
            &c(mat2(&a)), &c(mat2(&b)), &c(Mat::zeros(2, 2)), &c(psd(&r, 0.2)),
            &c(psd(&q, 0.0)), &psd(&g, 0.0), &grid,
        ).unwrap();
        for v in &p.values {
            prop_assert!(linalg::asym_residual(v) <= 1e-12);
            prop_assert!(linalg::min_eig(v) >= -1e-9 * (1.0 + v.norm()));
        }
    }

    #[test]
    fn filter_covariance_is_psd_and_below_the_open_loop_variance(
        a in -1.0f64..1.0,
        c1 in 0.0f64..1.5,
        f1 in 0.0f64..2.0,
        k1 in 0.3f64..2.0,
    ) {
        let mut s = GameSpec::zeros(Dims { n: 1, m: 1, followers: 1, l1: 1, l2: 1 }, TimeGrid::new(1.0, 200));
        s.dynamics.a = CoefficientFn::scalar(a);
        s.dynamics.c1 = CoefficientFn::scalar(c1);
        s.observations.f1 = CoefficientFn::scalar(f1);
        s.observations.k1 = CoefficientFn::scalar(k1);
        let sigma = solve_filter_covariance(&s).unwrap();
        let open = |t: f64| if a.abs() < 1e-12 { c1 * c1 * t } else { c1 * c1 * ((2.0 * a * t).exp() - 1.0) / (2.0 * a) };
        for (k, v) in sigma.values.iter().enumerate() {
            let x = v[(0, 0)];
            prop_assert!(x >= -1e-12);
            prop_assert!(x <= open(s.grid.t(k)) + 1e-8);
        }
    }

    #[test]
    fn formation_weight_forms_are_psd(w in prop::collection::vec(0.0f64..3.0, 3)) {
        let cfg = triangle_example(0.0, 10);
        let f = cfg.spec.formation_form(&w);
        prop_assert!(linalg::asym_residual(&f) <= 1e-12);
        prop_assert!(linalg::min_eig(&f) >= -1e-10 * (1.0 + f.norm()));
        let x = cfg.spec.lifted_x0();
        let direct: f64 = cfg.spec.graph.edges.iter().zip(&w).map(|(e, wt)| {
            let x0 = &cfg.spec.x0;
            wt * (0..2).map(|c| (x0[2 * e.head + c] - x0[2 * e.tail + c] - e.offset[c]).powi(2)).sum::<f64>()
        }).sum();
        let lifted = (x.transpose() * &f * &x)[(0, 0)];
        prop_assert!((lifted - direct).abs() <= 1e-10 * (1.0 + direct), "{} {}", lifted, direct);
    }
}
