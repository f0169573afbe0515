use stackelberg::leader_fbsde::stack::{extrapolated_value, level_value_from_m5, relative_distance};
use std::sync::OnceLock;
use stackelberg::leader_fbsde::*;
use stackelberg::linalg::Mat;
use stackelberg::odesolve::MatrixTrajectory;
use stackelberg::model::{CoefficientFn, Definiteness, TimeGrid};

fn sc(x: f64) -> CoefficientFn {
    CoefficientFn::scalar(x)
}

fn coupled_scalar(steps: usize) -> FbsdeLqProblem {
    let mut p = FbsdeLqProblem::zeros(1, 1, 1, 1, TimeGrid::new(1.0, steps));
    p.x0 = Mat::from_element(1, 1, 1.0);
    p.a1 = sc(0.2);
    p.b1 = sc(0.3);
    p.d1 = sc(1.0);
    p.e1 = sc(0.1);
    p.c1[0] = sc(0.2);
    p.a2[0] = sc(0.3);
    p.a3 = sc(0.1);
    p.b3 = sc(-0.2);
    p.c3[0] = sc(0.1);
    p.d3 = sc(0.5);
    p.e3 = sc(0.2);
    p.a4 = sc(1.0);
    p.b4 = sc(0.5);
    p.c4[0] = sc(1.0);
    p.d4 = sc(1.0);
    p.g = Mat::from_element(1, 1, 1.0);
    p.xi = Mat::from_element(1, 1, 0.3);
    p.definiteness = Definiteness::Definite;
    p
}

struct Solved {
    p: FbsdeLqProblem,
    es: EnlargedSystem,
    st: LeaderRiccatiStack,
    dd: DefiniteDecoupling,
}

fn solved() -> &'static Solved {
    static CELL: OnceLock<Solved> = OnceLock::new();
    CELL.get_or_init(|| {
        let p = coupled_scalar(200);
        let es = build_enlarged_system(&p).unwrap();
        let st = solve_riccati_stack(&es, &p, &default_i_sequence()).unwrap();
        let dd = solve_definite_decoupling(&p).unwrap();
        Solved { p, es, st, dd }
    })
}

fn q_block(dd: &DefiniteDecoupling, r: usize, c: usize, sign: f64) -> MatrixTrajectory {
    dd.q.map(|_, m| Mat::from_element(1, 1, sign * m[(r, c)]))
}

#[test]
fn regularized_stack_matches_definite_decoupling() {
    let s = solved();
    assert!(relative_distance(&s.st.p1, &q_block(&s.dd, 0, 0, 1.0)) < 1e-8);
    assert!(relative_distance(&s.st.p2, &q_block(&s.dd, 0, 1, 1.0)) < 1e-8);
    assert!(relative_distance(&s.st.p2, &q_block(&s.dd, 1, 0, 1.0)) < 1e-8);
    assert!(relative_distance(&s.st.p3, &q_block(&s.dd, 1, 1, -1.0)) < 1e-8);
    let fb = adjoint_feedback(&s.st);
    assert!(relative_distance(&fb.gx, &s.dd.gx) < 1e-8);
    assert!(relative_distance(&fb.gh, &s.dd.gh) < 1e-8);
    assert!(relative_distance(&fb.affine, &s.dd.affine) < 1e-6);
}

#[test]
fn affine_terms_agree_across_routes() {
    let s = solved();
    let phi1_dd = s.dd.phi.map(|_, m| Mat::from_element(1, 1, m[(0, 0)]));
    let phi2_dd = s.dd.phi.map(|_, m| Mat::from_element(1, 1, m[(1, 0)]));
    assert!(relative_distance(&s.st.phi1_recovered, &phi1_dd) < 1e-7);
    assert!(relative_distance(&s.st.phi2_recovered, &phi2_dd) < 1e-7);
    assert!(relative_distance(&s.st.phi1, &s.st.phi1_recovered) < 1e-6);
    assert!(relative_distance(&s.st.phi2, &s.st.phi2_recovered) < 1e-6);
}

#[test]
fn convergence_diagnostics() {
    let r = &solved().st.report;
    assert!(r.recovery_residual < 1e-12);
    assert!(r.mainrela_residual < 1e-10);
    assert!(r.limit_ode_distance < 1e-8);
    assert!(r.limit_ode_consistency < 1e-10);
    assert!(r.extrapolated_converged);
    assert!(!r.raw_converged);
    // the raw blocks approach their limit like 1/i
    let c = &r.raw_changes;
    let ratio = c[c.len() - 1] / c[c.len() - 2];
    assert!((ratio - 0.5).abs() < 0.05, "ratio {ratio}");
    assert!(r.extrapolated_changes.windows(2).all(|w| w[1] < w[0]));
    assert_eq!(r.m1_inertia.0, 0);
}

#[test]
fn value_routes_agree_on_every_level() {
    let s = solved();
    for l in &s.st.levels {
        let b = level_value_from_m5(&s.es, &s.p, l).unwrap();
        assert!((l.value - b).abs() < 1e-7 * (1.0 + l.value.abs()), "i={} {} vs {}", l.i, l.value, b);
    }
    let v: Vec<f64> = s.st.levels.iter().map(|l| l.value).collect();
    assert!(v.windows(2).all(|w| w[1] > w[0]));
    let ext = extrapolated_value(&s.st.levels);
    assert!(ext > *v.last().unwrap() && ext - v.last().unwrap() < 1e-4);
}

#[test]
fn leader_gain_routes_agree() {
    let s = solved();
    let a = leader_gain(&s.st).unwrap();
    let b = leader_gain_definite(&s.dd, 1).unwrap();
    for k in 0..s.p.grid.steps {
        assert!((a.gx.at(k) - b.gx.at(k)).norm() < 1e-6 * (1.0 + b.gx.at(k).norm()));
        assert!((a.gy.at(k) - b.gy.at(k)).norm() < 1e-6 * (1.0 + b.gy.at(k).norm()));
    }
}

#[test]
fn indefinite_flag_does_not_change_a_definite_problem() {
    let mut p = coupled_scalar(100);
    p.definiteness = Definiteness::Indefinite;
    let es = build_enlarged_system(&p).unwrap();
    let st = solve_riccati_stack(&es, &p, &default_i_sequence()[..8]).unwrap();
    let mut q = p.clone();
    q.definiteness = Definiteness::Definite;
    let sd = solve_riccati_stack(&es, &q, &default_i_sequence()[..8]).unwrap();
    assert!(st.p1.max_node_diff(&sd.p1) < 1e-14);
    assert!(st.p3.max_node_diff(&sd.p3) < 1e-14);
}

#[test]
fn negative_control_weight_is_handled_by_the_regularized_route() {
    let mut p = coupled_scalar(100);
    p.d4 = sc(-4.0);
    // keeps C4 + P̃3 = C4 − i away from zero on the index sequence
    p.c4[0] = sc(1.5);
    p.definiteness = Definiteness::Indefinite;
    let es = build_enlarged_system(&p).unwrap();
    assert!(solve_definite_decoupling(&p).is_err());
    let st = solve_riccati_stack(&es, &p, &default_i_sequence()).unwrap();
    let r = &st.report;
    assert!(r.limit_ode_distance < 1e-6, "{}", r.limit_ode_distance);
    // C4 + P̃3 changes sign on the i = 2 level
    assert_eq!(r.skipped_levels, vec![2.0]);
    assert!(r.mainrela_residual < 1e-9);
    assert!(r.m1_inertia.0 > 0);
    assert_eq!(r.penalty_negative_directions, 1);
    assert!(r.extrapolated_converged);
    assert!(st.p3.at(0)[(0, 0)] < 0.0);
}

#[test]
fn positive_penalty_with_negative_weight_escapes() {
    let mut p = coupled_scalar(100);
    p.d4 = sc(-4.0);
    p.definiteness = Definiteness::Indefinite;
    let es = build_enlarged_system(&p).unwrap();
    assert_eq!(stack::penalty_signature(&p)[(0, 0)], -1.0);
    let err = stack::solve_level(&es, &p, 1024.0, &Mat::identity(1, 1)).unwrap_err();
    assert!(matches!(err, stackelberg::Error::NonFinite { .. }), "{err:?}");
}


