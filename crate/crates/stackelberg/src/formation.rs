//! Multi-robot formation control compiled into a game instance.
//!
//! Robots are double integrators in `n_coord` coordinates with state (position, velocity).
//! Vertex 0 is the leader, vertex i the i-th follower. The game state stacks the robot states
//! in that order and appends a block of `2·n_coord` constant coordinates equal to one, so that
//! offset and tracking terms become purely quadratic.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::equilibrium::{solve_equilibrium_with, Equilibrium, StackMethod};
use crate::linalg::{self, Mat};
use crate::model::{
    CoefficientFn, CostWeights, Definiteness, Dims, Dynamics, GameSpec, Observations, TimeGrid,
};
use crate::simulate::{self, LeaderPolicy, QuadraticForm, SimConfig, SimResult};
use crate::odesolve::MatrixTrajectory;
use crate::{Error, Result};

fn one() -> f64 {
    1.0
}

/// A directed edge. Its error is X^head − X^tail − offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub head: usize,
    pub tail: usize,
    /// Desired displacement (position then velocity), length 2·n_coord.
    pub offset: Vec<f64>,
    /// Weight of the reported formation error.
    #[serde(default = "one")]
    pub weight: f64,
    /// Per-follower terminal weights w; defaults to `weight` for every follower.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub follower_terminal: Option<Vec<f64>>,
    /// Per-follower running weights μ; defaults to `weight` for every follower.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub follower_running: Option<Vec<f64>>,
    /// Leader terminal weight ν.
    #[serde(default)]
    pub leader_terminal: f64,
    /// Leader running weight θ.
    #[serde(default)]
    pub leader_running: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    /// Leader plus followers.
    pub vertices: usize,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Error,
    FollowerTerminal(usize),
    FollowerRunning(usize),
    LeaderTerminal,
    LeaderRunning,
}

impl Edge {
    pub fn weight_for(&self, ch: Channel) -> f64 {
        let pick = |v: &Option<Vec<f64>>, i: usize| v.as_ref().map_or(self.weight, |w| w[i]);
        match ch {
            Channel::Error => self.weight,
            Channel::FollowerTerminal(i) => pick(&self.follower_terminal, i),
            Channel::FollowerRunning(i) => pick(&self.follower_running, i),
            Channel::LeaderTerminal => self.leader_terminal,
            Channel::LeaderRunning => self.leader_running,
        }
    }
}

impl Graph {
    pub fn followers(&self) -> usize {
        self.vertices.saturating_sub(1)
    }

    pub fn weights(&self, ch: Channel) -> Vec<f64> {
        self.edges.iter().map(|e| e.weight_for(ch)).collect()
    }

    pub fn is_connected(&self) -> bool {
        if self.vertices == 0 {
            return false;
        }
        let mut adj = vec![Vec::new(); self.vertices];
        for e in &self.edges {
            adj[e.head].push(e.tail);
            adj[e.tail].push(e.head);
        }
        let mut seen = vec![false; self.vertices];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for &u in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    queue.push_back(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn validate(&self, n_coord: usize) -> Result<()> {
        let bad = |s: String| Err(Error::PreconditionViolated(s));
        if self.vertices < 2 {
            return bad("a formation needs a leader and at least one follower".into());
        }
        let nf = self.followers();
        for (k, e) in self.edges.iter().enumerate() {
            if e.head >= self.vertices || e.tail >= self.vertices {
                return bad(format!("edge {k} references a missing vertex"));
            }
            if e.head == e.tail {
                return bad(format!("edge {k} is a self-loop"));
            }
            if e.offset.len() != 2 * n_coord {
                return Err(Error::ShapeMismatch(format!(
                    "edge {k} offset has length {}, expected {}",
                    e.offset.len(),
                    2 * n_coord
                )));
            }
            for v in [&e.follower_terminal, &e.follower_running].into_iter().flatten() {
                if v.len() != nf {
                    return Err(Error::ShapeMismatch(format!("edge {k} needs {nf} follower weights")));
                }
                if v.iter().any(|w| *w < 0.0 || !w.is_finite()) {
                    return bad(format!("edge {k} has a negative weight"));
                }
            }
            if [e.weight, e.leader_terminal, e.leader_running].iter().any(|w| *w < 0.0 || !w.is_finite()) {
                return bad(format!("edge {k} has a negative weight"));
            }
        }
        if !self.is_connected() {
            return bad("graph is not connected".into());
        }
        Ok(())
    }

    /// Edges whose offset disagrees with the potentials fixed by a spanning tree, that is,
    /// offsets that do not sum to zero around some cycle.
    pub fn cycle_inconsistencies(&self, tol: f64) -> Vec<usize> {
        let dim = self.edges.first().map_or(0, |e| e.offset.len());
        let mut pot: Vec<Option<Vec<f64>>> = vec![None; self.vertices];
        let mut adj = vec![Vec::new(); self.vertices];
        for (k, e) in self.edges.iter().enumerate() {
            adj[e.head].push(k);
            adj[e.tail].push(k);
        }
        for root in 0..self.vertices {
            if pot[root].is_some() {
                continue;
            }
            pot[root] = Some(vec![0.0; dim]);
            let mut queue = VecDeque::from([root]);
            while let Some(v) = queue.pop_front() {
                let pv = pot[v].clone().unwrap();
                for &k in &adj[v] {
                    let e = &self.edges[k];
                    let (u, sign) = if e.head == v { (e.tail, -1.0) } else { (e.head, 1.0) };
                    if pot[u].is_none() {
                        pot[u] = Some(pv.iter().zip(&e.offset).map(|(p, d)| p + sign * d).collect());
                        queue.push_back(u);
                    }
                }
            }
        }
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, e)| {
                let (h, t) = (pot[e.head].as_ref().unwrap(), pot[e.tail].as_ref().unwrap());
                (0..dim).any(|c| (h[c] - t[c] - e.offset[c]).abs() > tol)
            })
            .map(|(k, _)| k)
            .collect()
    }
}

/// Vertex-by-edge matrix with +1 at the head and −1 at the tail of every edge.
pub fn incidence_matrix(g: &Graph) -> Mat {
    let mut d = Mat::zeros(g.vertices, g.edges.len());
    for (k, e) in g.edges.iter().enumerate() {
        d[(e.head, k)] = 1.0;
        d[(e.tail, k)] = -1.0;
    }
    d
}

/// L = D·diag(w)·Dᵀ.
pub fn weighted_laplacian(d: &Mat, w: &[f64]) -> Mat {
    let wd = Mat::from_diagonal(&nalgebra::DVector::from_column_slice(w));
    d * wd * d.transpose()
}

/// Desired leader motion: the double integrator from `x0` under the constant control `u_ref`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tracking {
    /// Terminal weight k2 on the leader's deviation, 2·n_coord square.
    pub terminal: Vec<Vec<f64>>,
    /// Running weight q2, 2·n_coord square.
    pub running: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
    pub u_ref: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormationSpec {
    pub graph: Graph,
    pub n_coord: usize,
    pub m: usize,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub steps: usize,
    /// Robot states, leader first, each (position, velocity).
    pub x0: Vec<f64>,
    /// Follower-channel diffusion over the robot states, 2(N+1)·n_coord rows.
    pub c1: Vec<Vec<f64>>,
    /// Leader-channel diffusion over the robot states.
    pub c2: Vec<Vec<f64>>,
    /// Follower control weights R_ii.
    pub follower_r: Vec<Vec<Vec<f64>>>,
    /// Leader control weight R_22.
    pub leader_r: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracking: Option<Tracking>,
}

fn mat(rows: &[Vec<f64>]) -> Result<Mat> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if rows.iter().any(|x| x.len() != c) {
        return Err(Error::ShapeMismatch("ragged matrix".into()));
    }
    Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
}

fn expect_shape(m: &Mat, r: usize, c: usize, what: &str) -> Result<()> {
    if m.shape() != (r, c) {
        return Err(Error::ShapeMismatch(format!("{what} is {:?}, expected ({r}, {c})", m.shape())));
    }
    Ok(())
}

impl FormationSpec {
    pub fn followers(&self) -> usize {
        self.graph.followers()
    }

    /// Dimension of the stacked robot state.
    pub fn robot_dim(&self) -> usize {
        2 * self.graph.vertices * self.n_coord
    }

    /// Dimension of the game state including the constant block.
    pub fn state_dim(&self) -> usize {
        self.robot_dim() + 2 * self.n_coord
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.t_end, self.steps)
    }

    /// Checks shapes, graph and weights. Returns warnings for cycle-inconsistent offsets.
    pub fn validate(&self) -> Result<Vec<String>> {
        self.graph.validate(self.n_coord)?;
        let (nx, nc, m) = (self.robot_dim(), self.n_coord, self.m);
        if nc == 0 || m == 0 || self.steps == 0 || !(self.t_end > 0.0) {
            return Err(Error::PreconditionViolated("empty dimensions or horizon".into()));
        }
        if self.x0.len() != nx {
            return Err(Error::ShapeMismatch(format!("x0 has length {}, expected {nx}", self.x0.len())));
        }
        expect_shape(&mat(&self.c1)?, nx, mat(&self.c1)?.ncols(), "c1")?;
        expect_shape(&mat(&self.c2)?, nx, mat(&self.c2)?.ncols(), "c2")?;
        if self.follower_r.len() != self.followers() {
            return Err(Error::ShapeMismatch("one control weight per follower".into()));
        }
        for (i, r) in self.follower_r.iter().enumerate() {
            let r = mat(r)?;
            expect_shape(&r, m, m, "follower control weight")?;
            if linalg::asym_residual(&r) > 1e-12 || linalg::min_eig(&r) <= 0.0 {
                return Err(Error::PreconditionViolated(format!("R of follower {} is not positive definite", i + 1)));
            }
        }
        let r2 = mat(&self.leader_r)?;
        expect_shape(&r2, m, m, "leader control weight")?;
        if linalg::asym_residual(&r2) > 1e-12 || linalg::max_eig(&r2) * linalg::min_eig(&r2) <= 0.0 {
            return Err(Error::PreconditionViolated("leader control weight is not definite".into()));
        }
        if let Some(tr) = &self.tracking {
            for (w, name) in [(&tr.terminal, "tracking terminal weight"), (&tr.running, "tracking running weight")] {
                let w = mat(w)?;
                expect_shape(&w, 2 * nc, 2 * nc, name)?;
                if linalg::asym_residual(&w) > 1e-12 || linalg::min_eig(&w) < -1e-12 {
                    return Err(Error::PreconditionViolated(format!("{name} is not positive semidefinite")));
                }
            }
            if tr.x0.len() != 2 * nc || tr.u_ref.len() != m {
                return Err(Error::ShapeMismatch("tracking target dimensions".into()));
            }
        }
        let bad = self.graph.cycle_inconsistencies(1e-12);
        let warnings: Vec<String> =
            bad.iter().map(|k| format!("offset of edge {k} is inconsistent around a cycle")).collect();
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok(warnings)
    }

    /// Indefinite for a negative definite R_22, definite for a positive definite one.
    pub fn leader_definiteness(&self) -> Result<Definiteness> {
        let r2 = mat(&self.leader_r)?;
        Ok(if linalg::max_eig(&r2) < 0.0 { Definiteness::Indefinite } else { Definiteness::Definite })
    }

    /// Robot dynamics block a = [[0, I], [0, 0]].
    fn a_block(&self) -> Mat {
        let nc = self.n_coord;
        let mut a = Mat::zeros(2 * nc, 2 * nc);
        linalg::set_block(&mut a, 0, nc, &linalg::eye(nc));
        a
    }

    /// Robot input block b = [[0], [I]].
    fn b_block(&self) -> Mat {
        let nc = self.n_coord;
        let mut b = Mat::zeros(2 * nc, self.m);
        for k in 0..nc.min(self.m) {
            b[(nc + k, k)] = 1.0;
        }
        b
    }

    /// Desired leader state at time t.
    pub fn leader_target(&self, t: f64) -> Option<Mat> {
        let tr = self.tracking.as_ref()?;
        let nc = self.n_coord;
        let acc = self.b_block() * linalg::col(&tr.u_ref);
        let x0 = linalg::col(&tr.x0);
        let mut x = x0.clone();
        for k in 0..nc {
            let (p, v, a) = (x0[k], x0[nc + k], acc[(nc + k, 0)]);
            x[k] = p + v * t + 0.5 * a * t * t;
            x[nc + k] = v + a * t;
        }
        Some(x)
    }

    /// Lifts XᵀWX − 2Xᵀv + κ to a quadratic form on (X, 1).
    fn lift(&self, w: &Mat, v: &Mat, kappa: f64) -> Mat {
        let nx = self.robot_dim();
        let two_n = 2 * self.n_coord;
        let s = two_n as f64;
        let ones = Mat::from_element(1, two_n, 1.0);
        let mut out = Mat::zeros(nx + two_n, nx + two_n);
        linalg::set_block(&mut out, 0, 0, w);
        let cross = v * &ones * (-1.0 / s);
        linalg::set_block(&mut out, 0, nx, &cross);
        linalg::set_block(&mut out, nx, 0, &cross.transpose());
        linalg::set_block(&mut out, nx, nx, &(ones.transpose() * &ones * (kappa / (s * s))));
        out
    }

    /// Σ_e w_e‖X^head − X^tail − d_e‖² as a form on the lifted state.
    pub fn formation_form(&self, w: &[f64]) -> Mat {
        let two_n = 2 * self.n_coord;
        let dhat = linalg::kron(&incidence_matrix(&self.graph), &linalg::eye(two_n));
        let what = linalg::kron(
            &Mat::from_diagonal(&nalgebra::DVector::from_column_slice(w)),
            &linalg::eye(two_n),
        );
        let d: Vec<f64> = self.graph.edges.iter().flat_map(|e| e.offset.iter().copied()).collect();
        let d = linalg::col(&d);
        let wd = &what * &d;
        self.lift(&(&dhat * &what * dhat.transpose()), &(&dhat * &wd), (d.transpose() * &wd)[(0, 0)])
    }

    /// ‖X^leader − target‖²_k as a form on the lifted state.
    fn tracking_form(&self, k: &Mat, target: &Mat) -> Mat {
        let nx = self.robot_dim();
        let two_n = 2 * self.n_coord;
        let mut e = Mat::zeros(nx, two_n);
        linalg::set_block(&mut e, 0, 0, &linalg::eye(two_n));
        let kt = k * target;
        self.lift(&(&e * k * e.transpose()), &(&e * &kt), (target.transpose() * &kt)[(0, 0)])
    }

    /// Formation error of the reporting weights as a trace functional on the game state.
    pub fn error_form(&self) -> QuadraticForm {
        let n = self.state_dim();
        QuadraticForm { w: self.formation_form(&self.graph.weights(Channel::Error)), c: Mat::zeros(n, 1), k: 0.0 }
    }

    /// The lifted initial state (robot states, then ones).
    pub fn lifted_x0(&self) -> Mat {
        let mut v = self.x0.clone();
        v.extend(std::iter::repeat_n(1.0, 2 * self.n_coord));
        linalg::col(&v)
    }

    fn pad_rows(&self, c: &Mat) -> Mat {
        let mut out = Mat::zeros(self.state_dim(), c.ncols());
        linalg::set_block(&mut out, 0, 0, c);
        out
    }

    /// Observation models with f1 = g1 = 0, K1 = I and a leader channel Y2 observing F2·X
    /// (robot coordinates) through K2.
    pub fn observations(&self, l1: usize, f2_robot: &Mat, k2: &Mat) -> Result<Observations> {
        let n = self.state_dim();
        let l2 = k2.nrows();
        expect_shape(f2_robot, l2, self.robot_dim(), "leader observation matrix")?;
        expect_shape(k2, l2, l2, "leader observation noise")?;
        let mut f2 = Mat::zeros(l2, n);
        linalg::set_block(&mut f2, 0, 0, f2_robot);
        Ok(Observations {
            f1: CoefficientFn::zeros(l1, n),
            g1: CoefficientFn::zeros(l1, 1),
            k1: CoefficientFn::constant(linalg::eye(l1)),
            f2: CoefficientFn::constant(f2),
            g2: CoefficientFn::zeros(l2, 1),
            k2: CoefficientFn::constant(k2.clone()),
        })
    }
}

/// Leader observation Y2 = F2·X dt + K2 dW² over the robot coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderObservation {
    pub f2: Vec<Vec<f64>>,
    pub k2: Vec<Vec<f64>>,
}

/// File format of the formation front end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormationConfig {
    #[serde(flatten)]
    pub spec: FormationSpec,
    pub leader_observation: LeaderObservation,
}

impl FormationConfig {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// f1 = g1 = 0 and K1 = I with l1 taken from the follower diffusion.
    pub fn observations(&self) -> Result<Observations> {
        let l1 = mat(&self.spec.c1)?.ncols();
        self.spec.observations(l1, &mat(&self.leader_observation.f2)?, &mat(&self.leader_observation.k2)?)
    }
}

/// Leader and two followers on a line: the leader holds the origin, the followers are asked to sit
/// one and two units behind it. Noise of size `noise` enters the velocities; the leader observes
/// its own position.
pub fn triangle_example(noise: f64, steps: usize) -> FormationConfig {
    let edge = |head, tail, d: f64| Edge {
        head,
        tail,
        offset: vec![d, 0.0],
        weight: 1.0,
        follower_terminal: None,
        follower_running: None,
        leader_terminal: 0.0,
        leader_running: 0.0,
    };
    let mut c1 = vec![vec![0.0, 0.0]; 6];
    c1[3][0] = noise;
    c1[5][1] = noise;
    let mut c2 = vec![vec![0.0]; 6];
    c2[1][0] = noise;
    let mut f2 = vec![vec![0.0; 6]];
    f2[0][0] = 1.0;
    FormationConfig {
        spec: FormationSpec {
            graph: Graph { vertices: 3, edges: vec![edge(0, 1, 1.0), edge(1, 2, 1.0), edge(0, 2, 2.0)] },
            n_coord: 1,
            m: 1,
            t_end: 10.0,
            steps,
            x0: vec![0.0, 0.0, 2.0, 0.0, -1.0, 0.0],
            c1,
            c2,
            follower_r: vec![vec![vec![1.0]]; 2],
            leader_r: vec![vec![1.0]],
            tracking: Some(Tracking {
                terminal: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                running: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                x0: vec![0.0, 0.0],
                u_ref: vec![0.0],
            }),
        },
        leader_observation: LeaderObservation { f2, k2: vec![vec![1.0]] },
    }
}

/// Compiles the formation problem into a game on the lifted state.
pub fn build_formation_game(fs: &FormationSpec, obs: &Observations) -> Result<GameSpec> {
    fs.validate()?;
    let nf = fs.followers();
    let nv = fs.graph.vertices;
    let (n, m) = (fs.state_dim(), fs.m);
    let grid = fs.grid();
    let c1 = mat(&fs.c1)?;
    let c2 = mat(&fs.c2)?;
    let (l1, l2) = (c1.ncols(), c2.ncols());
    for (c, r, k, name) in [(&obs.f1, l1, n, "f1"), (&obs.f2, l2, n, "f2"), (&obs.g1, l1, 1, "g1"), (&obs.g2, l2, 1, "g2"),
        (&obs.k1, l1, l1, "K1"), (&obs.k2, l2, l2, "K2")]
    {
        if c.shape() != (r, k) {
            return Err(Error::ShapeMismatch(format!("{name} is {:?}, expected ({r}, {k})", c.shape())));
        }
    }

    let mut sel = Mat::zeros(nv + 1, nv + 1);
    for v in 0..nv {
        sel[(v, v)] = 1.0;
    }
    let a = linalg::kron(&sel, &fs.a_block());
    let unit = |v: usize| {
        let mut e = Mat::zeros(nv + 1, 1);
        e[(v, 0)] = 1.0;
        linalg::kron(&e, &fs.b_block())
    };

    let follower_costs = (0..nf)
        .map(|i| {
            let mut c = CostWeights::zeros(n, m);
            c.q = CoefficientFn::constant(fs.formation_form(&fs.graph.weights(Channel::FollowerRunning(i))));
            c.g = fs.formation_form(&fs.graph.weights(Channel::FollowerTerminal(i)));
            c.r = CoefficientFn::constant(mat(&fs.follower_r[i])?);
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut leader = CostWeights::zeros(n, m);
    let q_form = fs.formation_form(&fs.graph.weights(Channel::LeaderRunning));
    leader.g = fs.formation_form(&fs.graph.weights(Channel::LeaderTerminal));
    leader.q = CoefficientFn::constant(q_form.clone());
    if let Some(tr) = &fs.tracking {
        let (kt, qt) = (mat(&tr.terminal)?, mat(&tr.running)?);
        leader.g += fs.tracking_form(&kt, &fs.leader_target(grid.t_end).unwrap());
        let moving = tr.u_ref.iter().any(|u| *u != 0.0) || tr.x0[fs.n_coord..].iter().any(|v| *v != 0.0);
        leader.q = if moving {
            CoefficientFn::from_fn(&grid, |t| &q_form + fs.tracking_form(&qt, &fs.leader_target(t).unwrap()))
        } else {
            CoefficientFn::constant(&q_form + fs.tracking_form(&qt, &fs.leader_target(0.0).unwrap()))
        };
    }
    leader.r = CoefficientFn::constant(mat(&fs.leader_r)?);

    Ok(GameSpec {
        dims: Dims { n, m, followers: nf, l1, l2 },
        grid,
        x0: fs.lifted_x0(),
        dynamics: Dynamics {
            a: CoefficientFn::constant(a),
            b1: (1..=nf).map(|i| CoefficientFn::constant(unit(i))).collect(),
            b2: CoefficientFn::constant(unit(0)),
            alpha: CoefficientFn::zeros(n, 1),
            c1: CoefficientFn::constant(fs.pad_rows(&c1)),
            c2: CoefficientFn::constant(fs.pad_rows(&c2)),
        },
        observations: obs.clone(),
        follower_costs,
        leader_cost: leader,
        leader_definiteness: fs.leader_definiteness()?,
    })
}

#[derive(Debug, Clone)]
pub struct FormationDemo {
    pub game: GameSpec,
    pub equilibrium: Equilibrium,
    pub sim: SimResult,
    /// (t, mean formation error).
    pub trace: Vec<[f64; 2]>,
}

impl FormationDemo {
    pub fn initial_error(&self) -> f64 {
        self.trace.first().map_or(f64::NAN, |p| p[1])
    }

    pub fn terminal_error(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |p| p[1])
    }

    /// Monte Carlo costs with the leader's control fixed at zero and followers best-responding.
    pub fn zero_leader_baseline(&self, cfg: &SimConfig) -> Result<SimResult> {
        let zero = MatrixTrajectory::constant(self.game.grid, Mat::zeros(self.game.dims.m, 1));
        let policy = LeaderPolicy::open_loop(&self.equilibrium, zero)?;
        simulate::run_closed_loop(&self.equilibrium, &policy, cfg)
    }

    pub fn write_trace_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "error"])?;
        for [t, e] in &self.trace {
            wr.write_record([t.to_string(), e.to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Solves the compiled game, simulates it and records the mean formation error.
///
/// The leader's stack comes from the limit equations: the lifted game has a constant block that
/// makes P3 singular, and the regularized route then has no invertible P̃3.
pub fn run_formation_demo(fs: &FormationSpec, obs: &Observations, cfg: &SimConfig) -> Result<FormationDemo> {
    if !obs.f1.is_zero() || !obs.g1.is_zero() || obs.k1.samples().iter().any(|(_, k)| **k != linalg::eye(k.nrows())) {
        return Err(Error::PreconditionViolated("the formation pipeline expects f1 = g1 = 0 and K1 = I".into()));
    }
    let game = build_formation_game(fs, obs)?;
    let equilibrium = solve_equilibrium_with(&game, &StackMethod::LimitOde)?;
    let mut cfg = cfg.clone();
    cfg.trace = Some(fs.error_form());
    let sim = simulate::run_closed_loop(&equilibrium, &LeaderPolicy::Equilibrium, &cfg)?;
    let trace = sim.trace.clone().unwrap_or_default();
    Ok(FormationDemo { game, equilibrium, sim, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn edge(head: usize, tail: usize, offset: Vec<f64>) -> Edge {
        Edge {
            head,
            tail,
            offset,
            weight: 1.0,
            follower_terminal: None,
            follower_running: None,
            leader_terminal: 0.0,
            leader_running: 0.0,
        }
    }

    fn triangle() -> FormationSpec {
        let g = Graph {
            vertices: 3,
            edges: vec![
                edge(0, 1, vec![1.0, 0.0]),
                edge(1, 2, vec![1.0, 0.0]),
                Edge { follower_terminal: Some(vec![2.0, 0.5]), leader_running: 0.3, ..edge(0, 2, vec![2.0, 0.0]) },
            ],
        };
        FormationSpec {
            graph: g,
            n_coord: 1,
            m: 1,
            t_end: 1.0,
            steps: 10,
            x0: vec![0.0, 0.0, 0.3, 0.1, -0.4, 0.0],
            c1: vec![vec![0.0]; 6],
            c2: vec![vec![0.0]; 6],
            follower_r: vec![vec![vec![1.0]]; 2],
            leader_r: vec![vec![-1.0]],
            tracking: Some(Tracking {
                terminal: vec![vec![1.0, 0.0], vec![0.0, 0.0]],
                running: vec![vec![0.5, 0.0], vec![0.0, 0.1]],
                x0: vec![0.0, 1.0],
                u_ref: vec![0.5],
            }),
        }
    }

    fn direct_error(fs: &FormationSpec, x: &[f64], w: &[f64]) -> f64 {
        let s = 2 * fs.n_coord;
        fs.graph
            .edges
            .iter()
            .zip(w)
            .map(|(e, w)| {
                w * (0..s).map(|c| (x[e.head * s + c] - x[e.tail * s + c] - e.offset[c]).powi(2)).sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn single_edge_incidence_and_laplacian() {
        let g = Graph { vertices: 2, edges: vec![edge(0, 1, vec![0.0, 0.0])] };
        let d = incidence_matrix(&g);
        assert_eq!(d, Mat::from_row_slice(2, 1, &[1.0, -1.0]));
        assert_eq!(weighted_laplacian(&d, &[1.0]), Mat::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
    }

    #[test]
    fn path_incidence_has_rank_two_and_zero_column_sums() {
        let g = Graph { vertices: 3, edges: vec![edge(0, 1, vec![0.0; 2]), edge(1, 2, vec![0.0; 2])] };
        let d = incidence_matrix(&g);
        assert_eq!(d.rank(1e-10), 2);
        for c in 0..d.ncols() {
            assert_eq!(d.column(c).sum(), 0.0);
        }
    }

    #[test]
    fn complete_graph_spectrum() {
        let g = Graph {
            vertices: 3,
            edges: vec![edge(0, 1, vec![0.0; 2]), edge(1, 2, vec![0.0; 2]), edge(2, 0, vec![0.0; 2])],
        };
        let l = weighted_laplacian(&incidence_matrix(&g), &[1.0; 3]);
        let mut ev = linalg::sym_eigenvalues(&l);
        ev.sort_by(f64::total_cmp);
        for (a, b) in ev.iter().zip([0.0, 3.0, 3.0]) {
            assert!((a - b).abs() < 1e-12, "{ev:?}");
        }
        assert!((l * Mat::from_element(3, 1, 1.0)).abs().max() < 1e-12);
    }

    #[test]
    fn lifted_form_matches_direct_sum() {
        let fs = triangle();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for ch in [Channel::Error, Channel::FollowerTerminal(0), Channel::FollowerTerminal(1), Channel::LeaderRunning] {
            let w = fs.graph.weights(ch);
            let k = fs.formation_form(&w);
            assert!(linalg::asym_residual(&k) < 1e-15);
            for _ in 0..100 {
                let x: Vec<f64> = (0..fs.robot_dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
                let mut lifted = x.clone();
                lifted.extend([1.0, 1.0]);
                let l = linalg::col(&lifted);
                let q = (l.transpose() * &k * &l)[(0, 0)];
                let direct = direct_error(&fs, &x, &w);
                assert!((q - direct).abs() <= 1e-10 * direct.abs().max(1.0), "{q} vs {direct}");
            }
        }
    }

    #[test]
    fn tracking_form_matches_direct_deviation() {
        let fs = triangle();
        let k = Mat::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let target = fs.leader_target(0.7).unwrap();
        assert!((target[(0, 0)] - (0.7 + 0.5 * 0.5 * 0.49)).abs() < 1e-15);
        let form = fs.tracking_form(&k, &target);
        let x = linalg::col(&[0.4, -0.2, 1.0, 2.0, 3.0, 4.0, 1.0, 1.0]);
        let dev = Mat::from_row_slice(2, 1, &[0.4, -0.2]) - &target;
        let direct = (dev.transpose() * &k * &dev)[(0, 0)];
        assert!(((x.transpose() * form * &x)[(0, 0)] - direct).abs() < 1e-12);
    }

    #[test]
    fn zero_offsets_decouple_the_constant_block() {
        let mut fs = triangle();
        for e in &mut fs.graph.edges {
            e.offset = vec![0.0; 2];
        }
        let k = fs.formation_form(&fs.graph.weights(Channel::Error));
        let nx = fs.robot_dim();
        assert_eq!(linalg::block(&k, 0, nx, nx, 2).abs().max(), 0.0);
        assert_eq!(linalg::block(&k, nx, nx, 2, 2).abs().max(), 0.0);
    }

    #[test]
    fn game_structure() {
        let fs = triangle();
        let obs = fs.observations(1, &Mat::zeros(1, 6), &linalg::eye(1)).unwrap();
        let g = build_formation_game(&fs, &obs).unwrap();
        assert_eq!(g.dims.n, 2 * (fs.followers() + 2) * fs.n_coord);
        let a = g.dynamics.a.node(0);
        assert_eq!(a.iter().filter(|x| **x == 1.0).count(), fs.graph.vertices * fs.n_coord);
        assert_eq!(a.iter().filter(|x| **x != 0.0 && **x != 1.0).count(), 0);
        assert_eq!(g.dynamics.b2.node(0)[(1, 0)], 1.0);
        assert_eq!(g.dynamics.b1[1].node(0)[(5, 0)], 1.0);
        assert!(g.leader_cost.q.node(0) != g.leader_cost.q.node(5));
        let v = crate::model::validate(&g);
        assert!(v.is_empty(), "{v:?}");
    }

    #[test]
    fn cycle_inconsistency_is_reported() {
        let mut fs = triangle();
        assert!(fs.validate().unwrap().is_empty());
        fs.graph.edges[2].offset = vec![1.5, 0.0];
        assert_eq!(fs.validate().unwrap().len(), 1);
    }

    #[test]
    fn rejects_bad_graphs() {
        let mut fs = triangle();
        fs.graph.edges = vec![edge(0, 1, vec![0.0; 2])];
        assert!(fs.validate().is_err());
        let mut fs = triangle();
        fs.graph.edges[0].tail = 0;
        assert!(fs.validate().is_err());
        let mut fs = triangle();
        fs.leader_r = vec![vec![0.0]];
        assert!(fs.validate().is_err());
    }
}
