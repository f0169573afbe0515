//! Monte Carlo closed-loop simulation: Euler–Maruyama paths of the state, both observation
//! processes, both filters and the leader's adjoint state, with left-endpoint cost accumulation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::equilibrium::Equilibrium;
use crate::filtering::{self, FilterGains, FilterState};
use crate::follower::FollowerSolution;
use crate::leader_fbsde::definite::{hamiltonian_blocks, DefiniteDecoupling, HamiltonianBlocks};
use crate::leader_fbsde::FbsdeLqProblem;
use crate::linalg::{self, Mat};
use crate::model::{CostWeights, GameSpec};
use crate::odesolve::MatrixTrajectory;
use crate::{Error, Result};

/// xᵀWx + 2cᵀx + k, averaged over paths at every node.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    pub w: Mat,
    pub c: Mat,
    pub k: f64,
}

impl QuadraticForm {
    pub fn eval(&self, x: &Mat) -> f64 {
        (x.transpose() * (&self.w * x + &self.c * 2.0))[(0, 0)] + self.k
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub paths: usize,
    pub seed: u64,
    /// Paths 2k and 2k + 1 share their increments with opposite signs.
    pub antithetic: bool,
    /// Number of leading paths whose trajectories are kept.
    pub record_paths: usize,
    pub trace: Option<QuadraticForm>,
}

impl SimConfig {
    pub fn new(paths: usize, seed: u64) -> Self {
        SimConfig { paths, seed, antithetic: false, record_paths: 0, trace: None }
    }
}

/// How the leader acts and where the followers' adjoints come from.
#[derive(Debug, Clone)]
pub enum LeaderPolicy {
    /// u2 = L6X̌ + L7h + S3 with h driven by the leader's innovation; the followers' adjoints
    /// are read off (X̌, h).
    Equilibrium,
    /// A deterministic leader input with followers best-responding to it.
    OpenLoop { u2: MatrixTrajectory, followers: Vec<FollowerSolution> },
}

impl LeaderPolicy {
    pub fn open_loop(eq: &Equilibrium, u2: MatrixTrajectory) -> Result<Self> {
        let followers = eq.followers_against(&u2)?;
        Ok(LeaderPolicy::OpenLoop { u2, followers })
    }
}

/// Deterministic additive changes to the followers' controls.
#[derive(Debug, Clone, Default)]
pub struct Perturbation {
    pub followers: Vec<Option<MatrixTrajectory>>,
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    /// None for a single path.
    pub se: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MatrixEstimate {
    pub mean: Vec<Vec<f64>>,
    pub se: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PathTrace {
    pub path: usize,
    pub x: Vec<Vec<f64>>,
    pub xhat: Vec<Vec<f64>>,
    pub xcheck: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimResult {
    pub paths: usize,
    pub excluded: usize,
    pub seed: u64,
    pub follower_costs: Vec<Estimate>,
    pub leader_cost: Estimate,
    pub terminal_mean: Vec<f64>,
    pub terminal_cov: Vec<Vec<f64>>,
    /// Sample second moment of X_T − X̂_T.
    pub hat_error_cov: MatrixEstimate,
    /// Sample second moment of X_T − X̌_T.
    pub check_error_cov: MatrixEstimate,
    /// Sample E[(X̂_T − X̌_T)(X_T − X̂_T)ᵀ].
    pub orthogonality: MatrixEstimate,
    /// Per innovation component: mean of (normalized increment)²/Δt.
    pub innovation_variance: Vec<Estimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<[f64; 2]>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub trajectories: Vec<PathTrace>,
}

/// Everything one path needs at a left endpoint.
struct Node {
    a: Mat,
    b1: Vec<Mat>,
    b2: Mat,
    alpha: Mat,
    c1: Mat,
    c2: Mat,
    f1: Mat,
    g1: Mat,
    k1: Mat,
    k1inv: Mat,
    f2: Mat,
    g2: Mat,
    k2: Mat,
    k2inv: Mat,
    kc: Vec<Mat>,
    rinv_b1t: Vec<Mat>,
    rinv_r: Vec<Mat>,
    gains: FilterGains,
    leader: LeaderNodeData,
    pert_followers: Vec<Option<Mat>>,
}

enum LeaderNodeData {
    Feedback {
        gx: Mat,
        gh: Mat,
        affine: Mat,
        p2t: Mat,
        p3: Mat,
        phi2: Mat,
        n7: Mat,
        n8: Mat,
        n9: Mat,
        n10: Vec<Mat>,
        n11: Vec<Mat>,
        n12: Vec<Mat>,
    },
    Path {
        u2: Mat,
        phi: Vec<Mat>,
    },
}

struct Weights {
    q: Mat,
    s: Mat,
    r: Mat,
    ql: Mat,
    rl: Mat,
}

impl Weights {
    fn at(c: &CostWeights, k: usize) -> Self {
        Weights { q: c.q.node(k), s: c.s.node(k), r: c.r.node(k), ql: c.q_lin.node(k), rl: c.r_lin.node(k) }
    }
}

fn terminal(c: &CostWeights, x: &Mat) -> f64 {
    (x.transpose() * (&c.g * x + &c.g_lin * 2.0))[(0, 0)]
}

struct Context<'a> {
    spec: &'a GameSpec,
    nodes: Vec<Node>,
    weights: Vec<Vec<Weights>>,
    nn: usize,
}

fn build_context<'a>(eq: &'a Equilibrium, policy: &LeaderPolicy, pert: &Perturbation) -> Result<Context<'a>> {
    let spec = &eq.spec;
    let grid = spec.grid;
    let nf = spec.dims.followers;
    let n = spec.dims.n;
    let pick = |v: &Vec<Option<MatrixTrajectory>>, i: usize, k: usize| v.get(i).and_then(|o| o.as_ref()).map(|t| t.at(k).clone());
    for t in pert.followers.iter().flatten() {
        if !t.grid.same_as(&grid) {
            return Err(Error::GridMismatch("perturbation grid differs from spec grid".into()));
        }
    }
    let mut nodes = Vec::with_capacity(grid.steps);
    for k in 0..grid.steps {
        let t = grid.t(k);
        let d = &spec.dynamics;
        let o = &spec.observations;
        let b1: Vec<Mat> = d.b1.iter().map(|b| b.node(k)).collect();
        let mut rinv_b1t = Vec::with_capacity(nf);
        let mut rinv_r = Vec::with_capacity(nf);
        for i in 0..nf {
            let c = &spec.follower_costs[i];
            let rinv = linalg::inverse_or(&c.r.node(k), "R1i", t)?;
            rinv_b1t.push(&rinv * b1[i].transpose());
            rinv_r.push(&rinv * c.r_lin.node(k));
        }
        let leader = match policy {
            LeaderPolicy::Equilibrium => {
                let nm = &eq.stack.nmats[k];
                LeaderNodeData::Feedback {
                    gx: eq.feedback.gx.at(k).clone(),
                    gh: eq.feedback.gh.at(k).clone(),
                    affine: eq.feedback.affine.at(k).clone(),
                    p2t: eq.stack.p2.at(k).transpose(),
                    p3: eq.stack.p3.at(k).clone(),
                    phi2: eq.stack.phi2.at(k).clone(),
                    n7: nm.n7.clone(),
                    n8: nm.n8.clone(),
                    n9: nm.n9.clone(),
                    n10: nm.n10.clone(),
                    n11: nm.n11.clone(),
                    n12: nm.n12.clone(),
                }
            }
            LeaderPolicy::OpenLoop { u2, followers } => {
                if !u2.grid.same_as(&grid) {
                    return Err(Error::GridMismatch("leader input grid differs from spec grid".into()));
                }
                LeaderNodeData::Path { u2: u2.at(k).clone(), phi: followers.iter().map(|f| f.phi.at(k).clone()).collect() }
            }
        };
        let sigma = eq.followers.first().map(|f| f.sigma.at(k).clone()).unwrap_or_else(|| Mat::zeros(n, n));
        nodes.push(Node {
            a: d.a.node(k),
            b2: d.b2.node(k),
            alpha: d.alpha.node(k),
            c1: d.c1.node(k),
            c2: d.c2.node(k),
            f1: o.f1.node(k),
            g1: o.g1.node(k),
            k1inv: linalg::inverse_or(&o.k1.node(k), "K1", t)?,
            k1: o.k1.node(k),
            f2: o.f2.node(k),
            g2: o.g2.node(k),
            k2inv: linalg::inverse_or(&o.k2.node(k), "K2", t)?,
            k2: o.k2.node(k),
            kc: eq.followers.iter().map(|f| f.gain_state.at(k).clone()).collect(),
            rinv_b1t,
            rinv_r,
            gains: FilterGains::at(spec, &sigma, eq.covariance.sigma_tilde.at(k), t)?,
            leader,
            pert_followers: (0..nf).map(|i| pick(&pert.followers, i, k)).collect(),
            b1,
        });
    }
    let weights = (0..grid.steps)
        .map(|k| {
            spec.follower_costs.iter().chain(std::iter::once(&spec.leader_cost)).map(|c| Weights::at(c, k)).collect()
        })
        .collect();
    Ok(Context { spec, nodes, weights, nn: eq.stack.nn })
}

struct PathRecord {
    costs: Vec<f64>,
    x: Mat,
    e_hat: Mat,
    e_check: Mat,
    d: Mat,
    innovation: Vec<f64>,
    trace: Vec<f64>,
    traj: Option<PathTrace>,
}

fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn fill_normals(rng: &mut ChaCha8Rng, out: &mut Mat, scale: f64) {
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = z * scale;
    }
}

fn normals(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Mat {
    let mut m = Mat::zeros(len, 1);
    fill_normals(rng, &mut m, scale);
    m
}

fn col(m: &Mat) -> Vec<f64> {
    m.iter().copied().collect()
}

/// xᵀQx + 2uᵀSx + uᵀRu + 2qᵀx + 2rᵀu with scratch buffers for Qx, Sx and Ru.
fn running_cost(w: &Weights, x: &Mat, u: &Mat, bx: &mut Mat, bu: &mut Mat) -> f64 {
    bx.gemm(1.0, &w.q, x, 0.0);
    let mut s = x.dot(bx);
    bx.resize_mut(w.s.nrows(), 1, 0.0);
    bx.gemm(1.0, &w.s, x, 0.0);
    s += 2.0 * u.dot(bx);
    bx.resize_mut(x.nrows(), 1, 0.0);
    bu.gemm(1.0, &w.r, u, 0.0);
    s + u.dot(bu) + 2.0 * w.ql.dot(x) + 2.0 * w.rl.dot(u)
}

fn simulate_path(ctx: &Context, cfg: &SimConfig, path: usize) -> std::result::Result<PathRecord, (usize, f64)> {
    let spec = ctx.spec;
    let grid = spec.grid;
    let dt = grid.dt();
    let sdt = dt.sqrt();
    let (n, m, nf) = (spec.dims.n, spec.dims.m, spec.dims.followers);
    let (l1, l2) = (spec.dims.l1, spec.dims.l2);
    let (stream, sign) =
        if cfg.antithetic { ((path / 2) as u64, if path % 2 == 0 { 1.0 } else { -1.0 }) } else { (path as u64, 1.0) };
    let mut rng = path_rng(cfg.seed, stream);
    let mut x = spec.x0.clone();
    let mut fs = FilterState::new(&spec.x0, l1, l2);
    let mut h = Mat::zeros(ctx.nn, 1);
    let mut costs = vec![0.0; nf + 1];
    let mut innovation = vec![0.0; l1 + l2];
    let mut trace = Vec::new();
    let mut traj = (path < cfg.record_paths).then(|| PathTrace { path, x: vec![], xhat: vec![], xcheck: vec![] });

    let z = |r: usize| Mat::zeros(r, 1);
    let (mut dw1, mut dw2, mut dy1, mut dy2) = (z(l1), z(l2), z(l1), z(l2));
    let (mut y, mut dh, mut u2, mut aff) = (z(ctx.nn), z(ctx.nn), z(m), z(m));
    let mut u1 = vec![z(m); nf];
    let mut u1c = vec![z(m); nf];
    let (mut common, mut push, mut pushc, mut step) = (z(n), z(n), z(n), z(n));
    let (mut drift_hat, mut drift_check, mut xc_old) = (z(n), z(n), z(n));
    let (mut db, mut dvn, mut bx, mut bu) = (z(l2), z(l1), z(n), z(m));

    for k in 0..grid.steps {
        let t = grid.t(k);
        let nd = &ctx.nodes[k];
        if let Some(q) = &cfg.trace {
            trace.push(q.eval(&x));
        }
        if let Some(tr) = traj.as_mut() {
            tr.x.push(col(&x));
            tr.xhat.push(col(&fs.xhat));
            tr.xcheck.push(col(&fs.xcheck));
        }
        fill_normals(&mut rng, &mut dw1, sign * sdt);
        fill_normals(&mut rng, &mut dw2, sign * sdt);

        match &nd.leader {
            LeaderNodeData::Feedback { gx, gh, affine, p2t, p3, phi2, .. } => {
                y.copy_from(phi2);
                y.gemm(1.0, p2t, &fs.xcheck, 1.0);
                y.gemm(-1.0, p3, &h, 1.0);
                u2.copy_from(affine);
                u2.gemm(1.0, gx, &fs.xcheck, 1.0);
                u2.gemm(1.0, gh, &h, 1.0);
            }
            LeaderNodeData::Path { u2: u, .. } => u2.copy_from(u),
        }
        for i in 0..nf {
            aff.copy_from(&nd.rinv_r[i]);
            aff.neg_mut();
            match &nd.leader {
                LeaderNodeData::Feedback { .. } => aff.gemm(-1.0, &nd.rinv_b1t[i], &y.rows(i * n, n), 1.0),
                LeaderNodeData::Path { phi, .. } => aff.gemm(-1.0, &nd.rinv_b1t[i], &phi[i], 1.0),
            }
            if let Some(p) = &nd.pert_followers[i] {
                aff += p;
            }
            u1[i].copy_from(&aff);
            u1[i].gemm(1.0, &nd.kc[i], &fs.xhat, 1.0);
            u1c[i].copy_from(&aff);
            u1c[i].gemm(1.0, &nd.kc[i], &fs.xcheck, 1.0);
        }
        let w = &ctx.weights[k];
        for i in 0..nf {
            costs[i] += running_cost(&w[i], &x, &u1[i], &mut bx, &mut bu) * dt;
        }
        costs[nf] += running_cost(&w[nf], &x, &u2, &mut bx, &mut bu) * dt;

        dy1.copy_from(&nd.g1);
        dy1.gemm(1.0, &nd.f1, &x, 1.0);
        dy1 *= dt;
        dy1.gemm(1.0, &nd.k1, &dw1, 1.0);
        dy2.copy_from(&nd.g2);
        dy2.gemm(1.0, &nd.f2, &x, 1.0);
        dy2 *= dt;
        dy2.gemm(1.0, &nd.k2, &dw2, 1.0);

        common.copy_from(&nd.alpha);
        common.gemm(1.0, &nd.b2, &u2, 1.0);
        push.fill(0.0);
        pushc.fill(0.0);
        for i in 0..nf {
            push.gemm(1.0, &nd.b1[i], &u1[i], 1.0);
            pushc.gemm(1.0, &nd.b1[i], &u1c[i], 1.0);
        }
        push += &common;
        pushc += &common;
        step.copy_from(&push);
        step.gemm(1.0, &nd.a, &x, 1.0);
        step *= dt;
        step.gemm(1.0, &nd.c1, &dw1, 1.0);
        step.gemm(1.0, &nd.c2, &dw2, 1.0);
        drift_hat.copy_from(&push);
        drift_hat.gemm(1.0, &nd.a, &fs.xhat, 1.0);
        drift_check.copy_from(&pushc);
        drift_check.gemm(1.0, &nd.a, &fs.xcheck, 1.0);
        x += &step;
        xc_old.copy_from(&fs.xcheck);
        filtering::filter_step(&mut fs, &nd.gains, t, &dy1, &dy2, &drift_hat, &drift_check, dt)
            .map_err(|_| (k, t))?;
        dvn.gemm(1.0, &nd.k1inv, &fs.dv, 0.0);
        db.gemm(1.0, &nd.k2inv, &fs.du, 0.0);
        for c in 0..l1 {
            innovation[c] += dvn[c] * dvn[c];
        }
        for c in 0..l2 {
            innovation[l1 + c] += db[c] * db[c];
        }
        if let LeaderNodeData::Feedback { n7, n8, n9, n10, n11, n12, .. } = &nd.leader {
            dh.copy_from(n9);
            dh.gemm(1.0, n7, &xc_old, 1.0);
            dh.gemm(1.0, n8, &h, 1.0);
            dh *= dt;
            for j in 0..l2 {
                dh.gemm(db[j], &n10[j], &xc_old, 1.0);
                dh.gemm(db[j], &n11[j], &h, 1.0);
                linalg::axpy(&mut dh, db[j], &n12[j]);
            }
            h += &dh;
        }
        if !linalg::is_finite(&x) || !linalg::is_finite(&h) || costs.iter().any(|c| !c.is_finite()) {
            return Err((k, t));
        }
    }
    if let Some(q) = &cfg.trace {
        trace.push(q.eval(&x));
    }
    if let Some(tr) = traj.as_mut() {
        tr.x.push(col(&x));
        tr.xhat.push(col(&fs.xhat));
        tr.xcheck.push(col(&fs.xcheck));
    }
    for i in 0..nf {
        costs[i] += terminal(&spec.follower_costs[i], &x);
    }
    costs[nf] += terminal(&spec.leader_cost, &x);
    let total = grid.steps as f64 * dt;
    for v in &mut innovation {
        *v /= total;
    }
    Ok(PathRecord {
        costs,
        e_hat: &x - &fs.xhat,
        e_check: &x - &fs.xcheck,
        d: &fs.xhat - &fs.xcheck,
        x,
        innovation,
        trace,
        traj,
    })
}

/// Per-path records in path order; non-finite paths are dropped and counted.
fn run_paths(ctx: &Context, cfg: &SimConfig) -> Result<(Vec<PathRecord>, usize)> {
    if cfg.paths == 0 {
        return Err(Error::PreconditionViolated("at least one path is required".into()));
    }
    let out: Vec<_> = (0..cfg.paths).into_par_iter().map(|p| (p, simulate_path(ctx, cfg, p))).collect();
    let mut records = Vec::with_capacity(cfg.paths);
    let mut bad = Vec::new();
    for (p, r) in out {
        match r {
            Ok(r) => records.push(r),
            Err((step, t)) => {
                log::warn!("path {p} left the finite range at step {step} (t = {t})");
                bad.push((p, step));
            }
        }
    }
    if !bad.is_empty() && bad.len() * 1000 > cfg.paths {
        return Err(Error::NonFinitePaths { excluded: bad.len(), paths: cfg.paths, path: bad[0].0, step: bad[0].1 });
    }
    Ok((records, bad.len()))
}

pub fn estimate(samples: impl Iterator<Item = f64> + Clone) -> Estimate {
    let n = samples.clone().count();
    let mean = samples.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return Estimate { mean, se: None };
    }
    let var = samples.map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    Estimate { mean, se: Some((var / n as f64).sqrt()) }
}

fn matrix_estimate(records: &[PathRecord], a: impl Fn(&PathRecord) -> &Mat, b: impl Fn(&PathRecord) -> &Mat) -> MatrixEstimate {
    let (r, c) = (a(&records[0]).nrows(), b(&records[0]).nrows());
    let mut mean = vec![vec![0.0; c]; r];
    let mut se = vec![vec![0.0; c]; r];
    for i in 0..r {
        for j in 0..c {
            let e = estimate(records.iter().map(|p| a(p)[i] * b(p)[j]));
            mean[i][j] = e.mean;
            se[i][j] = e.se.unwrap_or(f64::NAN);
        }
    }
    MatrixEstimate { mean, se: (records.len() > 1).then_some(se) }
}

fn aggregate(ctx: &Context, cfg: &SimConfig, records: Vec<PathRecord>, excluded: usize) -> SimResult {
    let spec = ctx.spec;
    let nf = spec.dims.followers;
    let n = spec.dims.n;
    let follower_costs = (0..nf).map(|i| estimate(records.iter().map(|r| r.costs[i]))).collect();
    let leader_cost = estimate(records.iter().map(|r| r.costs[nf]));
    let m = records.len() as f64;
    let terminal_mean: Vec<f64> = (0..n).map(|i| records.iter().map(|r| r.x[i]).sum::<f64>() / m).collect();
    let denom = (m - 1.0).max(1.0);
    let terminal_cov = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    records.iter().map(|r| (r.x[i] - terminal_mean[i]) * (r.x[j] - terminal_mean[j])).sum::<f64>() / denom
                })
                .collect()
        })
        .collect();
    let innovation_variance =
        (0..spec.dims.l1 + spec.dims.l2).map(|c| estimate(records.iter().map(|r| r.innovation[c]))).collect();
    let trace = cfg.trace.as_ref().map(|_| {
        (0..spec.grid.len()).map(|k| [spec.grid.t(k), records.iter().map(|r| r.trace[k]).sum::<f64>() / m]).collect()
    });
    let hat_error_cov = matrix_estimate(&records, |r| &r.e_hat, |r| &r.e_hat);
    let check_error_cov = matrix_estimate(&records, |r| &r.e_check, |r| &r.e_check);
    let orthogonality = matrix_estimate(&records, |r| &r.d, |r| &r.e_hat);
    let trajectories = records.into_iter().filter_map(|r| r.traj).collect();
    SimResult {
        paths: cfg.paths,
        excluded,
        seed: cfg.seed,
        follower_costs,
        leader_cost,
        terminal_mean,
        terminal_cov,
        hat_error_cov,
        check_error_cov,
        orthogonality,
        innovation_variance,
        trace,
        trajectories,
    }
}

pub fn run_closed_loop(eq: &Equilibrium, policy: &LeaderPolicy, cfg: &SimConfig) -> Result<SimResult> {
    run_perturbed(eq, policy, &Perturbation::default(), cfg)
}

pub fn run_perturbed(eq: &Equilibrium, policy: &LeaderPolicy, pert: &Perturbation, cfg: &SimConfig) -> Result<SimResult> {
    let ctx = build_context(eq, policy, pert)?;
    let (records, excluded) = run_paths(&ctx, cfg)?;
    Ok(aggregate(&ctx, cfg, records, excluded))
}

/// Per-path costs of the given player, keyed by path index (dropped paths absent).
fn player_costs(eq: &Equilibrium, policy: &LeaderPolicy, pert: &Perturbation, cfg: &SimConfig, player: Player) -> Result<Vec<Option<f64>>> {
    let ctx = build_context(eq, policy, pert)?;
    let idx = match player {
        Player::Follower(i) => i,
        Player::Leader => eq.spec.dims.followers,
    };
    let out: Vec<_> = (0..cfg.paths).into_par_iter().map(|p| simulate_path(&ctx, cfg, p).ok().map(|r| r.costs[idx])).collect();
    let bad = out.iter().filter(|c| c.is_none()).count();
    if bad * 1000 > cfg.paths {
        let first = out.iter().position(|c| c.is_none()).unwrap_or(0);
        return Err(Error::NonFinitePaths { excluded: bad, paths: cfg.paths, path: first, step: 0 });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Player {
    Follower(usize),
    Leader,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationRow {
    pub eps: f64,
    /// J(ū + εv) − J(ū).
    pub diff: Estimate,
    /// [J(ū + εv) − J(ū − εv)] / (2ε).
    pub quotient: Estimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationTable {
    pub player: Player,
    pub rows: Vec<PerturbationRow>,
    /// Least-squares c in diff ≈ c·ε² and its coefficient of determination.
    pub curvature: f64,
    pub r_squared: f64,
}

fn paired(a: &[Option<f64>], b: &[Option<f64>], scale: f64) -> Estimate {
    let v: Vec<f64> = a.iter().zip(b).filter_map(|(x, y)| Some((x.as_ref()? - y.as_ref()?) * scale)).collect();
    estimate(v.iter().copied())
}

/// Cost differences along a deterministic direction `v` with common random numbers, around the
/// leader's equilibrium control frozen as a path. A follower deviation leaves the leader's input
/// unchanged; a leader deviation is met by the followers' best response to the deviated input.
/// Needs a deterministic equilibrium leader control, i.e. a vanishing leader filter gain.
pub fn perturbation_experiment(
    eq: &Equilibrium,
    player: Player,
    v: &MatrixTrajectory,
    epsilons: &[f64],
    cfg: &SimConfig,
) -> Result<PerturbationTable> {
    let nf = eq.spec.dims.followers;
    if let Player::Follower(i) = player {
        if i >= nf {
            return Err(Error::ShapeMismatch(format!("follower {i} of {nf}")));
        }
    }
    if eq.covariance.gain.max_abs() != 0.0 {
        return Err(Error::PreconditionViolated(
            "perturbations are taken around a deterministic leader control; the leader filter gain must vanish".into(),
        ));
    }
    if !v.grid.same_as(&eq.spec.grid) {
        return Err(Error::GridMismatch("direction grid differs from spec grid".into()));
    }
    let ubar = eq.mean_leader_control();
    let base_policy = LeaderPolicy::open_loop(eq, ubar.clone())?;
    let costs = |eps: f64| -> Result<Vec<Option<f64>>> {
        let scaled = v.map(|_, m| m * eps);
        match player {
            Player::Leader => {
                let u = MatrixTrajectory::from_fn(eq.spec.grid, |k| ubar.at(k) + scaled.at(k));
                player_costs(eq, &LeaderPolicy::open_loop(eq, u)?, &Perturbation::default(), cfg, player)
            }
            Player::Follower(i) => {
                let pert = Perturbation { followers: (0..nf).map(|j| (j == i).then(|| scaled.clone())).collect() };
                player_costs(eq, &base_policy, &pert, cfg, player)
            }
        }
    };
    let base = costs(0.0)?;
    let mut rows = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let plus = costs(eps)?;
        let minus = costs(-eps)?;
        let quotient = if eps == 0.0 { Estimate { mean: 0.0, se: Some(0.0) } } else { paired(&plus, &minus, 0.5 / eps) };
        rows.push(PerturbationRow { eps, diff: paired(&plus, &base, 1.0), quotient });
    }
    let (curvature, r_squared) = quadratic_fit(&rows);
    Ok(PerturbationTable { player, rows, curvature, r_squared })
}

/// Fit of diff ≈ c·ε² through the origin.
fn quadratic_fit(rows: &[PerturbationRow]) -> (f64, f64) {
    let sxx: f64 = rows.iter().map(|r| r.eps.powi(4)).sum();
    let sxy: f64 = rows.iter().map(|r| r.eps.powi(2) * r.diff.mean).sum();
    if sxx == 0.0 {
        return (0.0, 0.0);
    }
    let c = sxy / sxx;
    let mean = rows.iter().map(|r| r.diff.mean).sum::<f64>() / rows.len() as f64;
    let ss_res: f64 = rows.iter().map(|r| (r.diff.mean - c * r.eps * r.eps).powi(2)).sum();
    let ss_tot: f64 = rows.iter().map(|r| (r.diff.mean - mean).powi(2)).sum();
    (c, if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot })
}

#[derive(Debug, Clone, Serialize)]
pub struct DecouplingResidual {
    /// max over nodes of the path-mean of ‖Ỹ − QX̃ − φ‖.
    pub max_mean: f64,
    pub terminal: f64,
    pub per_node: Vec<f64>,
}

/// Simulates X̃ = (X, h) under the decoupled control, rebuilds Ỹ backward from its terminal
/// value along each path with the decoupled integrands, and measures ‖Ỹ − QX̃ − φ‖.
pub fn decoupling_residual(p: &FbsdeLqProblem, dd: &DefiniteDecoupling, cfg: &SimConfig) -> Result<DecouplingResidual> {
    let grid = p.grid;
    if !dd.grid.same_as(&grid) {
        return Err(Error::GridMismatch("decoupling and problem grids differ".into()));
    }
    let d = p.n + p.nn;
    let l = p.channels;
    let dt = grid.dt();
    let hbs: Vec<HamiltonianBlocks> = (0..grid.len()).map(|k| hamiltonian_blocks(&p.node(k), grid.t(k))).collect::<Result<_>>()?;
    let mut x0 = Mat::zeros(d, 1);
    linalg::set_block(&mut x0, 0, 0, &p.x0);
    let mut fterm = Mat::zeros(d, d);
    linalg::set_block(&mut fterm, 0, 0, &p.g);
    linalg::set_block(&mut fterm, 0, p.n, &p.f.transpose());
    linalg::set_block(&mut fterm, p.n, 0, &p.f);
    let mut xi = Mat::zeros(d, 1);
    linalg::set_block(&mut xi, p.n, 0, &p.xi);
    let zt = |k: usize, x: &Mat, j: usize| dd.k[j].at(k) * x + dd.j[j].at(k) * dd.phi.at(k) + dd.i[j].at(k) * dd.q.at(k) * &hbs[k].e2[j];
    let per_path: Vec<std::result::Result<Vec<f64>, usize>> = (0..cfg.paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = path_rng(cfg.seed, path as u64);
            let mut xs = vec![x0.clone()];
            let mut zs = Vec::with_capacity(grid.steps);
            let mut dbs = Vec::with_capacity(grid.steps);
            for k in 0..grid.steps {
                let x = &xs[k];
                let hb = &hbs[k];
                let y = dd.q.at(k) * x + dd.phi.at(k);
                let db = normals(&mut rng, l, dt.sqrt());
                let z: Vec<Mat> = (0..l).map(|j| zt(k, x, j)).collect();
                let mut drift = &hb.a1 * x + &hb.b1 * &y + &hb.e1;
                let mut next = x.clone();
                for j in 0..l {
                    drift += &hb.c1[j] * &z[j];
                    next += (&hb.a2[j] * x + &hb.b2[j] * &y + &hb.c2[j] * &z[j] + &hb.e2[j]) * db[j];
                }
                next += drift * dt;
                if !linalg::is_finite(&next) {
                    return Err(k);
                }
                xs.push(next);
                zs.push(z);
                dbs.push(db);
            }
            let mut res = vec![0.0; grid.len()];
            let mut y = &fterm * &xs[grid.steps] + &xi;
            res[grid.steps] = (&y - dd.q.at(grid.steps) * &xs[grid.steps] - dd.phi.at(grid.steps)).norm();
            for k in (0..grid.steps).rev() {
                let hb = &hbs[k];
                let x = &xs[k];
                let mut drift = &hb.a3 * x + &hb.b3 * &y + &hb.e3;
                let mut mart = Mat::zeros(d, 1);
                for j in 0..l {
                    drift += &hb.c3[j] * &zs[k][j];
                    mart += &zs[k][j] * dbs[k][j];
                }
                y = &y + drift * dt - mart;
                res[k] = (&y - dd.q.at(k) * x - dd.phi.at(k)).norm();
            }
            Ok(res)
        })
        .collect();
    let mut sum = vec![0.0; grid.len()];
    let mut good = 0usize;
    let mut bad = Vec::new();
    for (p, r) in per_path.into_iter().enumerate() {
        match r {
            Ok(r) => {
                good += 1;
                for (s, v) in sum.iter_mut().zip(r) {
                    *s += v;
                }
            }
            Err(step) => bad.push((p, step)),
        }
    }
    if good == 0 || bad.len() * 1000 > cfg.paths {
        let (path, step) = bad.first().copied().unwrap_or((0, 0));
        return Err(Error::NonFinitePaths { excluded: bad.len(), paths: cfg.paths, path, step });
    }
    let per_node: Vec<f64> = sum.into_iter().map(|s| s / good as f64).collect();
    Ok(DecouplingResidual {
        max_mean: per_node.iter().copied().fold(0.0, f64::max),
        terminal: per_node[grid.steps],
        per_node,
    })
}

impl SimResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Trajectories of one retained path as CSV rows (t, x…, xhat…, xcheck…).
pub fn write_trace_csv<W: std::io::Write>(spec: &GameSpec, tr: &PathTrace, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let n = spec.dims.n;
    let mut header = vec!["t".to_string()];
    for tag in ["x", "xhat", "xcheck"] {
        header.extend((0..n).map(|i| format!("{tag}{i}")));
    }
    out.write_record(&header)?;
    for k in 0..tr.x.len() {
        let mut row = vec![spec.grid.t(k).to_string()];
        for v in [&tr.x[k], &tr.xhat[k], &tr.xcheck[k]] {
            row.extend(v.iter().map(|x| x.to_string()));
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Mean terminal state as a matrix (convenience for callers comparing with ODE solutions).
pub fn terminal_mean_matrix(r: &SimResult) -> Mat {
    Mat::from_column_slice(r.terminal_mean.len(), 1, &r.terminal_mean)
}

