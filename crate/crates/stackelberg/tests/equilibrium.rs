use stackelberg::equilibrium::solve_equilibrium;
use stackelberg::linalg::Mat;
use stackelberg::model::{self, CoefficientFn, GameSpec};

fn sc(x: f64) -> CoefficientFn {
    CoefficientFn::scalar(x)
}

fn benchmark(steps: usize) -> GameSpec {
    model::scalar_benchmark(steps)
}

#[test]
fn benchmark_cost_routes_agree() {
    let eq = solve_equilibrium(&benchmark(400)).unwrap();
    let c = eq.leader_cost().unwrap();
    println!("{c:?}");
    assert!(c.split_exact);
    assert!((c.reduced - c.reduced_m5).abs() < 1e-6 * c.reduced.abs().max(1.0));
    assert!((c.error_part - c.error_part_covariance).abs() < 1e-6);
}

#[test]
fn noiseless_homogeneous_cost_is_initial_quadratic() {
    let mut s = benchmark(400);
    s.dynamics.alpha = sc(0.0);
    s.dynamics.c1 = sc(0.0);
    let f = &mut s.follower_costs[0];
    f.q_lin = sc(0.0);
    f.g_lin = Mat::zeros(1, 1);
    let eq = solve_equilibrium(&s).unwrap();
    let c = eq.leader_cost().unwrap();
    assert_eq!(c.error_part, 0.0);
    let want = 0.5 * eq.stack.p1.first()[(0, 0)];
    assert!((c.reduced - want).abs() < 1e-8, "{} vs {want}", c.reduced);
    assert!((c.reduced_m5 - want).abs() < 1e-6);
}
