use stackelberg::equilibrium::{solve_equilibrium_with, StackMethod};
use stackelberg::formation::*;
use stackelberg::model::{self, Definiteness};
use stackelberg::simulate::SimConfig;
use stackelberg::Error;

#[test]
fn noiseless_formation_converges() {
    let cfg = triangle_example(0.0, 400);
    let demo = run_formation_demo(&cfg.spec, &cfg.observations().unwrap(), &SimConfig::new(1, 1)).unwrap();
    assert_eq!(demo.trace.len(), 401);
    assert!((demo.initial_error() - 14.0).abs() < 1e-12);
    assert!(demo.terminal_error() < 0.1 * demo.initial_error(), "{}", demo.terminal_error());
    // the leader already sits on its target and nothing pushes it away
    assert!(demo.sim.leader_cost.mean.abs() < 1e-12);
}

#[test]
fn zero_weights_give_zero_controls() {
    let mut cfg = triangle_example(0.4, 100);
    for e in &mut cfg.spec.graph.edges {
        e.follower_terminal = Some(vec![0.0, 0.0]);
        e.follower_running = Some(vec![0.0, 0.0]);
    }
    cfg.spec.tracking = None;
    let demo = run_formation_demo(&cfg.spec, &cfg.observations().unwrap(), &SimConfig::new(200, 5)).unwrap();
    let eq = &demo.equilibrium;
    assert_eq!(eq.feedback.gx.max_abs(), 0.0);
    assert_eq!(eq.feedback.gh.max_abs(), 0.0);
    assert_eq!(eq.feedback.affine.max_abs(), 0.0);
    for f in &eq.followers {
        assert_eq!(f.gain_state.max_abs(), 0.0);
    }
    assert_eq!(demo.sim.leader_cost.mean, 0.0);
    assert!(demo.sim.follower_costs.iter().all(|c| c.mean == 0.0));
    // the robots are free double integrators, so the formation error spreads out
    assert!(demo.terminal_error() > demo.initial_error());
}

#[test]
fn equilibrium_leader_beats_idle_leader() {
    let cfg = triangle_example(0.3, 200);
    let demo = run_formation_demo(&cfg.spec, &cfg.observations().unwrap(), &SimConfig::new(400, 11)).unwrap();
    let base = demo.zero_leader_baseline(&SimConfig::new(400, 11)).unwrap();
    let (a, b) = (demo.sim.leader_cost, base.leader_cost);
    let se = (a.se.unwrap().powi(2) + b.se.unwrap().powi(2)).sqrt();
    assert!(a.mean <= b.mean + 3.0 * se, "{a:?} vs {b:?}");
}

#[test]
fn compiled_game_passes_validation() {
    let cfg = triangle_example(0.3, 50);
    let g = build_formation_game(&cfg.spec, &cfg.observations().unwrap()).unwrap();
    assert!(model::validate(&g).is_empty());
    assert_eq!(g.leader_definiteness, Definiteness::Definite);
    assert_eq!(g.dims.n, 8);
}

#[test]
fn negative_leader_weight_is_indefinite_and_escapes_on_long_horizons() {
    let mut cfg = triangle_example(0.0, 200);
    cfg.spec.leader_r = vec![vec![-1.0]];
    let g = build_formation_game(&cfg.spec, &cfg.observations().unwrap()).unwrap();
    assert_eq!(g.leader_definiteness, Definiteness::Indefinite);
    assert!(model::validate(&g).is_empty());
    let err = solve_equilibrium_with(&g, &StackMethod::LimitOde).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");

    cfg.spec.t_end = 0.5;
    cfg.spec.steps = 50;
    let g = build_formation_game(&cfg.spec, &cfg.observations().unwrap()).unwrap();
    assert!(solve_equilibrium_with(&g, &StackMethod::LimitOde).is_ok());
}

#[test]
fn config_round_trips_through_json() {
    let cfg = triangle_example(0.2, 30);
    let text = serde_json::to_string_pretty(&cfg).unwrap();
    let back: FormationConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.json");
    std::fs::write(&path, text).unwrap();
    assert_eq!(FormationConfig::load(&path).unwrap(), cfg);
}

#[test]
fn trace_csv_has_header_and_rows() {
    let cfg = triangle_example(0.0, 20);
    let demo = run_formation_demo(&cfg.spec, &cfg.observations().unwrap(), &SimConfig::new(1, 1)).unwrap();
    let mut buf = Vec::new();
    demo.write_trace_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,error");
    assert_eq!(lines.len(), 22);
    assert!(lines[1].starts_with("0,14"));
}

#[test]
fn limit_route_agrees_with_regularized_route_on_a_small_game() {
    // the scalar benchmark has an invertible P3 on [0, T), so both routes apply
    let spec = model::scalar_benchmark(100);
    let a = solve_equilibrium_with(&spec, &StackMethod::default()).unwrap();
    let b = solve_equilibrium_with(&spec, &StackMethod::LimitOde).unwrap();
    let d = a.feedback.gx.max_node_diff(&b.feedback.gx).max(a.feedback.gh.max_node_diff(&b.feedback.gh));
    assert!(d < 1e-6, "{d}");
}
