//! Problem data for the one-leader / N-follower game, with JSON I/O and assumption checks.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::linalg::{self, Mat};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    #[serde(rename = "N")]
    pub followers: usize,
    pub l1: usize,
    pub l2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    #[serde(rename = "T")]
    pub t_end: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, steps: usize) -> Self {
        TimeGrid { t_end, steps }
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.steps as f64
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.t_end
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.t(k)).collect()
    }

    /// Node index and interpolation weight for time `t` (clamped to the grid).
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let s = (t / self.dt()).clamp(0.0, self.steps as f64);
        let k = (s.floor() as usize).min(self.steps.saturating_sub(1));
        (k, s - k as f64)
    }

    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.steps == other.steps && (self.t_end - other.t_end).abs() <= 1e-12 * self.t_end.abs().max(1.0)
    }
}

/// Matrix-valued function of time: a constant or one sample per grid node.
#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientFn {
    Constant(Mat),
    Nodes(Vec<Mat>),
}

impl CoefficientFn {
    pub fn zeros(r: usize, c: usize) -> Self {
        CoefficientFn::Constant(Mat::zeros(r, c))
    }

    pub fn constant(m: Mat) -> Self {
        CoefficientFn::Constant(m)
    }

    pub fn scalar(x: f64) -> Self {
        CoefficientFn::Constant(Mat::from_element(1, 1, x))
    }

    pub fn from_fn(grid: &TimeGrid, f: impl Fn(f64) -> Mat) -> Self {
        CoefficientFn::Nodes(grid.times().into_iter().map(f).collect())
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            CoefficientFn::Constant(m) => m.shape(),
            CoefficientFn::Nodes(v) => v.first().map(|m| m.shape()).unwrap_or((0, 0)),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, CoefficientFn::Constant(_))
    }

    pub fn is_zero(&self) -> bool {
        match self {
            CoefficientFn::Constant(m) => m.iter().all(|x| *x == 0.0),
            CoefficientFn::Nodes(v) => v.iter().all(|m| m.iter().all(|x| *x == 0.0)),
        }
    }

    pub fn node(&self, k: usize) -> Mat {
        match self {
            CoefficientFn::Constant(m) => m.clone(),
            CoefficientFn::Nodes(v) => v[k].clone(),
        }
    }

    pub fn eval(&self, t: f64, grid: &TimeGrid) -> Mat {
        match self {
            CoefficientFn::Constant(m) => m.clone(),
            CoefficientFn::Nodes(v) => {
                let (k, w) = grid.locate(t);
                if w == 0.0 || k + 1 >= v.len() {
                    v[k].clone()
                } else {
                    &v[k] * (1.0 - w) + &v[k + 1] * w
                }
            }
        }
    }

    /// Samples to check: one for a constant, every node otherwise.
    pub fn samples(&self) -> Vec<(usize, &Mat)> {
        match self {
            CoefficientFn::Constant(m) => vec![(0, m)],
            CoefficientFn::Nodes(v) => v.iter().enumerate().collect(),
        }
    }

    fn node_count_ok(&self, grid: &TimeGrid) -> bool {
        match self {
            CoefficientFn::Constant(_) => true,
            CoefficientFn::Nodes(v) => v.len() == grid.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    pub a: CoefficientFn,
    pub b1: Vec<CoefficientFn>,
    pub b2: CoefficientFn,
    pub alpha: CoefficientFn,
    pub c1: CoefficientFn,
    pub c2: CoefficientFn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub f1: CoefficientFn,
    pub g1: CoefficientFn,
    pub k1: CoefficientFn,
    pub f2: CoefficientFn,
    pub g2: CoefficientFn,
    pub k2: CoefficientFn,
}

/// Quadratic cost data {Q, S, R, q, r, G, g} of one player.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub q: CoefficientFn,
    pub s: CoefficientFn,
    pub r: CoefficientFn,
    pub q_lin: CoefficientFn,
    pub r_lin: CoefficientFn,
    pub g: Mat,
    pub g_lin: Mat,
}

impl CostWeights {
    pub fn zeros(n: usize, m: usize) -> Self {
        CostWeights {
            q: CoefficientFn::zeros(n, n),
            s: CoefficientFn::zeros(m, n),
            r: CoefficientFn::zeros(m, m),
            q_lin: CoefficientFn::zeros(n, 1),
            r_lin: CoefficientFn::zeros(m, 1),
            g: Mat::zeros(n, n),
            g_lin: Mat::zeros(n, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Definiteness {
    Definite,
    Indefinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GameSpec {
    pub dims: Dims,
    pub grid: TimeGrid,
    pub x0: Mat,
    pub dynamics: Dynamics,
    pub observations: Observations,
    pub follower_costs: Vec<CostWeights>,
    pub leader_cost: CostWeights,
    pub leader_definiteness: Definiteness,
}

impl GameSpec {
    /// All-zero game with identity observation noise and unit follower control weights.
    pub fn zeros(dims: Dims, grid: TimeGrid) -> Self {
        let Dims { n, m, followers, l1, l2 } = dims;
        let mut fc = CostWeights::zeros(n, m);
        fc.r = CoefficientFn::constant(linalg::eye(m));
        let mut lc = CostWeights::zeros(n, m);
        lc.r = CoefficientFn::constant(-linalg::eye(m));
        GameSpec {
            dims,
            grid,
            x0: Mat::zeros(n, 1),
            dynamics: Dynamics {
                a: CoefficientFn::zeros(n, n),
                b1: vec![CoefficientFn::zeros(n, m); followers],
                b2: CoefficientFn::zeros(n, m),
                alpha: CoefficientFn::zeros(n, 1),
                c1: CoefficientFn::zeros(n, l1),
                c2: CoefficientFn::zeros(n, l2),
            },
            observations: Observations {
                f1: CoefficientFn::zeros(l1, n),
                g1: CoefficientFn::zeros(l1, 1),
                k1: CoefficientFn::constant(linalg::eye(l1)),
                f2: CoefficientFn::zeros(l2, n),
                g2: CoefficientFn::zeros(l2, 1),
                k2: CoefficientFn::constant(linalg::eye(l2)),
            },
            follower_costs: vec![fc; followers],
            leader_cost: lc,
            leader_definiteness: Definiteness::Indefinite,
        }
    }

    pub fn with_grid(&self, grid: TimeGrid) -> Result<Self> {
        if self.has_node_samples() && !grid.same_as(&self.grid) {
            return Err(Error::GridMismatch(
                "time-varying coefficients cannot be moved to another grid".into(),
            ));
        }
        let mut s = self.clone();
        s.grid = grid;
        Ok(s)
    }

    fn all_coeffs(&self) -> Vec<&CoefficientFn> {
        let d = &self.dynamics;
        let o = &self.observations;
        let mut v = vec![&d.a, &d.b2, &d.alpha, &d.c1, &d.c2, &o.f1, &o.g1, &o.k1, &o.f2, &o.g2, &o.k2];
        v.extend(d.b1.iter());
        for c in self.follower_costs.iter().chain(std::iter::once(&self.leader_cost)) {
            v.extend([&c.q, &c.s, &c.r, &c.q_lin, &c.r_lin]);
        }
        v
    }

    pub fn has_node_samples(&self) -> bool {
        self.all_coeffs().iter().any(|c| !c.is_constant())
    }
}

/// Scalar one-follower game on [0, 1] with a positive leader control weight. The leader's
/// observation carries no signal (f2 = 0), so its control is deterministic.
pub fn scalar_benchmark(steps: usize) -> GameSpec {
    let sc = CoefficientFn::scalar;
    let one = |x| Mat::from_element(1, 1, x);
    let mut s = GameSpec::zeros(Dims { n: 1, m: 1, followers: 1, l1: 1, l2: 1 }, TimeGrid::new(1.0, steps));
    s.x0 = one(1.0);
    s.dynamics.a = sc(0.2);
    s.dynamics.b1 = vec![sc(0.8)];
    s.dynamics.b2 = sc(0.5);
    s.dynamics.alpha = sc(0.1);
    s.dynamics.c1 = sc(0.3);
    let f = &mut s.follower_costs[0];
    f.q = sc(1.0);
    f.g = one(0.5);
    f.q_lin = sc(0.1);
    f.g_lin = one(0.2);
    s.leader_cost.q = sc(1.5);
    s.leader_cost.r = sc(0.8);
    s.leader_cost.g = one(0.7);
    s.leader_definiteness = Definiteness::Definite;
    s
}

/// One failed assumption: field, node index and predicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub node: usize,
    pub t: f64,
    pub predicate: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} at t={} (node {})", self.field, self.predicate, self.t, self.node)
    }
}

#[derive(Clone, Copy)]
enum Sign {
    Psd,
    Pd,
    Nd,
}

struct Checker<'a> {
    grid: &'a TimeGrid,
    out: Vec<Violation>,
}

impl Checker<'_> {
    fn push(&mut self, field: &str, node: usize, predicate: &str) {
        self.out.push(Violation {
            field: field.to_string(),
            node,
            t: self.grid.t(node),
            predicate: predicate.to_string(),
        });
    }

    fn shape(&mut self, field: &str, c: &CoefficientFn, r: usize, cols: usize) -> bool {
        if !c.node_count_ok(self.grid) {
            self.push(field, 0, "node count differs from steps+1");
            return false;
        }
        for (k, m) in c.samples() {
            if m.shape() != (r, cols) {
                self.push(field, k, &format!("has shape {:?}, expected ({r}, {cols})", m.shape()));
                return false;
            }
            if !linalg::is_finite(m) {
                self.push(field, k, "not finite");
                return false;
            }
        }
        true
    }

    fn mat_shape(&mut self, field: &str, m: &Mat, r: usize, c: usize) -> bool {
        self.shape(field, &CoefficientFn::Constant(m.clone()), r, c)
    }

    fn invertible(&mut self, field: &str, c: &CoefficientFn) {
        for (k, m) in c.samples() {
            if linalg::inverse_checked(m).is_err() {
                self.push(field, k, "singular");
                return;
            }
        }
    }

    fn sign(&mut self, field: &str, c: &CoefficientFn, sign: Sign) {
        for (k, m) in c.samples() {
            let scale = 1.0 + m.norm();
            if linalg::asym_residual(m) > 1e-10 * scale {
                self.push(field, k, "not symmetric");
                return;
            }
            let ev = linalg::sym_eigenvalues(m);
            let (lo, hi) = (ev.first().copied().unwrap_or(0.0), ev.last().copied().unwrap_or(0.0));
            let tol = 1e-12 * scale;
            let (ok, what) = match sign {
                Sign::Psd => (lo >= -1e-10 * scale, "not positive semidefinite"),
                Sign::Pd => (lo > tol, "not positive definite"),
                Sign::Nd => (hi < -tol, "not negative definite"),
            };
            if !ok {
                self.push(field, k, what);
                return;
            }
        }
    }
}

/// Checks every structural and sign assumption at every node; returns the violations found.
pub fn validate(spec: &GameSpec) -> Vec<Violation> {
    let grid = &spec.grid;
    let mut ck = Checker { grid, out: Vec::new() };
    let Dims { n, m, followers, l1, l2 } = spec.dims;
    if n == 0 || m == 0 || followers == 0 || l1 == 0 || l2 == 0 {
        ck.push("dims", 0, "must be strictly positive");
        return ck.out;
    }
    if !(grid.t_end > 0.0 && grid.t_end.is_finite()) || grid.steps == 0 {
        ck.push("grid", 0, "must have T > 0 and steps > 0");
        return ck.out;
    }
    let d = &spec.dynamics;
    let o = &spec.observations;
    ck.mat_shape("x0", &spec.x0, n, 1);
    ck.shape("A", &d.a, n, n);
    if d.b1.len() != followers {
        ck.push("B1", 0, &format!("has {} entries, expected N = {followers}", d.b1.len()));
    }
    for (i, b) in d.b1.iter().enumerate() {
        ck.shape(&format!("B1{}", i + 1), b, n, m);
    }
    ck.shape("B2", &d.b2, n, m);
    ck.shape("alpha", &d.alpha, n, 1);
    ck.shape("C1", &d.c1, n, l1);
    ck.shape("C2", &d.c2, n, l2);
    ck.shape("f1", &o.f1, l1, n);
    ck.shape("g1", &o.g1, l1, 1);
    if ck.shape("K1", &o.k1, l1, l1) {
        ck.invertible("K1", &o.k1);
    }
    ck.shape("f2", &o.f2, l2, n);
    ck.shape("g2", &o.g2, l2, 1);
    if ck.shape("K2", &o.k2, l2, l2) {
        ck.invertible("K2", &o.k2);
    }
    if spec.follower_costs.len() != followers {
        ck.push("follower_costs", 0, &format!("has {} entries, expected N = {followers}", spec.follower_costs.len()));
    }
    let cost = |ck: &mut Checker, tag: &str, c: &CostWeights, r_sign: Sign| {
        if ck.shape(&format!("Q{tag}"), &c.q, n, n) {
            ck.sign(&format!("Q{tag}"), &c.q, Sign::Psd);
        }
        ck.shape(&format!("S{tag}"), &c.s, m, n);
        if ck.shape(&format!("R{tag}"), &c.r, m, m) {
            ck.sign(&format!("R{tag}"), &c.r, r_sign);
        }
        ck.shape(&format!("q{tag}"), &c.q_lin, n, 1);
        ck.shape(&format!("r{tag}"), &c.r_lin, m, 1);
        let g = CoefficientFn::Constant(c.g.clone());
        if ck.shape(&format!("G{tag}"), &g, n, n) {
            ck.sign(&format!("G{tag}"), &g, Sign::Psd);
        }
        ck.mat_shape(&format!("g{tag}"), &c.g_lin, n, 1);
    };
    for (i, c) in spec.follower_costs.iter().enumerate() {
        cost(&mut ck, &format!("1{}", i + 1), c, Sign::Pd);
    }
    let leader_sign = match spec.leader_definiteness {
        Definiteness::Definite => Sign::Pd,
        Definiteness::Indefinite => Sign::Nd,
    };
    cost(&mut ck, "2", &spec.leader_cost, leader_sign);
    ck.out
}

// ---- JSON ----

fn parse_mat(v: &Value, field: &str) -> Result<Mat> {
    let rows = v.as_array().ok_or_else(|| Error::Parse(format!("{field}: expected nested array")))?;
    let data: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            r.as_array()
                .ok_or_else(|| Error::Parse(format!("{field}: expected row array")))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| Error::Parse(format!("{field}: non-numeric entry"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let r = data.len();
    let c = data.first().map(|x| x.len()).unwrap_or(0);
    if data.iter().any(|row| row.len() != c) {
        return Err(Error::Parse(format!("{field}: ragged rows")));
    }
    Ok(Mat::from_fn(r, c, |i, j| data[i][j]))
}

fn parse_vec(v: &Value, field: &str) -> Result<Mat> {
    let xs = v.as_array().ok_or_else(|| Error::Parse(format!("{field}: expected array")))?;
    let data: Vec<f64> = xs
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| Error::Parse(format!("{field}: non-numeric entry"))))
        .collect::<Result<_>>()?;
    Ok(linalg::col(&data))
}

fn depth(v: &Value) -> usize {
    match v {
        Value::Array(a) => 1 + a.first().map(depth).unwrap_or(0),
        _ => 0,
    }
}

/// Matrix coefficient: 2-D array is constant, 3-D array is per node.
fn parse_mat_fn(v: &Value, field: &str) -> Result<CoefficientFn> {
    match depth(v) {
        2 => Ok(CoefficientFn::Constant(parse_mat(v, field)?)),
        3 => Ok(CoefficientFn::Nodes(
            v.as_array().unwrap().iter().map(|x| parse_mat(x, field)).collect::<Result<_>>()?,
        )),
        _ => Err(Error::Parse(format!("{field}: expected 2-D or 3-D array"))),
    }
}

/// Vector coefficient: 1-D array is constant, 2-D array is per node.
fn parse_vec_fn(v: &Value, field: &str) -> Result<CoefficientFn> {
    match depth(v) {
        1 => Ok(CoefficientFn::Constant(parse_vec(v, field)?)),
        2 => Ok(CoefficientFn::Nodes(
            v.as_array().unwrap().iter().map(|x| parse_vec(x, field)).collect::<Result<_>>()?,
        )),
        _ => Err(Error::Parse(format!("{field}: expected 1-D or 2-D array"))),
    }
}

fn mat_json(m: &Mat) -> Value {
    Value::Array((0..m.nrows()).map(|i| json!(m.row(i).iter().copied().collect::<Vec<f64>>())).collect())
}

fn vec_json(m: &Mat) -> Value {
    json!(m.iter().copied().collect::<Vec<f64>>())
}

fn mat_fn_json(c: &CoefficientFn) -> Value {
    match c {
        CoefficientFn::Constant(m) => mat_json(m),
        CoefficientFn::Nodes(v) => Value::Array(v.iter().map(mat_json).collect()),
    }
}

fn vec_fn_json(c: &CoefficientFn) -> Value {
    match c {
        CoefficientFn::Constant(m) => vec_json(m),
        CoefficientFn::Nodes(v) => Value::Array(v.iter().map(vec_json).collect()),
    }
}

fn get<'a>(obj: &'a Value, key: &str, ctx: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| Error::Parse(format!("{ctx}: missing key `{key}`")))
}

fn opt_mat_fn(obj: &Value, key: &str, ctx: &str, r: usize, c: usize) -> Result<CoefficientFn> {
    match obj.get(key) {
        Some(v) => parse_mat_fn(v, &format!("{ctx}.{key}")),
        None => Ok(CoefficientFn::zeros(r, c)),
    }
}

fn opt_vec_fn(obj: &Value, key: &str, ctx: &str, r: usize) -> Result<CoefficientFn> {
    match obj.get(key) {
        Some(v) => parse_vec_fn(v, &format!("{ctx}.{key}")),
        None => Ok(CoefficientFn::zeros(r, 1)),
    }
}

fn parse_cost(v: &Value, ctx: &str, n: usize, m: usize) -> Result<CostWeights> {
    Ok(CostWeights {
        q: parse_mat_fn(get(v, "Q", ctx)?, &format!("{ctx}.Q"))?,
        s: opt_mat_fn(v, "S", ctx, m, n)?,
        r: parse_mat_fn(get(v, "R", ctx)?, &format!("{ctx}.R"))?,
        q_lin: opt_vec_fn(v, "q", ctx, n)?,
        r_lin: opt_vec_fn(v, "r", ctx, m)?,
        g: match v.get("G") {
            Some(x) => parse_mat(x, &format!("{ctx}.G"))?,
            None => Mat::zeros(n, n),
        },
        g_lin: match v.get("g") {
            Some(x) => parse_vec(x, &format!("{ctx}.g"))?,
            None => Mat::zeros(n, 1),
        },
    })
}

fn cost_json(c: &CostWeights) -> Value {
    json!({
        "Q": mat_fn_json(&c.q), "S": mat_fn_json(&c.s), "R": mat_fn_json(&c.r),
        "q": vec_fn_json(&c.q_lin), "r": vec_fn_json(&c.r_lin),
        "G": mat_json(&c.g), "g": vec_json(&c.g_lin),
    })
}

/// Parses a spec from a JSON value without validating assumptions.
pub fn spec_from_json(root: &Value) -> Result<GameSpec> {
    let dims: Dims = serde_json::from_value(get(root, "dims", "root")?.clone())?;
    let grid: TimeGrid = serde_json::from_value(get(root, "grid", "root")?.clone())?;
    let (n, m) = (dims.n, dims.m);
    let dy = get(root, "dynamics", "root")?;
    let ob = get(root, "observations", "root")?;
    let b1 = get(dy, "B1", "dynamics")?
        .as_array()
        .ok_or_else(|| Error::Parse("dynamics.B1: expected array of matrices".into()))?
        .iter()
        .enumerate()
        .map(|(i, b)| parse_mat_fn(b, &format!("dynamics.B1[{i}]")))
        .collect::<Result<_>>()?;
    let dynamics = Dynamics {
        a: parse_mat_fn(get(dy, "A", "dynamics")?, "dynamics.A")?,
        b1,
        b2: parse_mat_fn(get(dy, "B2", "dynamics")?, "dynamics.B2")?,
        alpha: opt_vec_fn(dy, "alpha", "dynamics", n)?,
        c1: parse_mat_fn(get(dy, "C1", "dynamics")?, "dynamics.C1")?,
        c2: parse_mat_fn(get(dy, "C2", "dynamics")?, "dynamics.C2")?,
    };
    let observations = Observations {
        f1: parse_mat_fn(get(ob, "f1", "observations")?, "observations.f1")?,
        g1: opt_vec_fn(ob, "g1", "observations", dims.l1)?,
        k1: parse_mat_fn(get(ob, "K1", "observations")?, "observations.K1")?,
        f2: parse_mat_fn(get(ob, "f2", "observations")?, "observations.f2")?,
        g2: opt_vec_fn(ob, "g2", "observations", dims.l2)?,
        k2: parse_mat_fn(get(ob, "K2", "observations")?, "observations.K2")?,
    };
    let follower_costs = get(root, "follower_costs", "root")?
        .as_array()
        .ok_or_else(|| Error::Parse("follower_costs: expected array".into()))?
        .iter()
        .enumerate()
        .map(|(i, c)| parse_cost(c, &format!("follower_costs[{i}]"), n, m))
        .collect::<Result<_>>()?;
    let leader_cost = parse_cost(get(root, "leader_cost", "root")?, "leader_cost", n, m)?;
    let leader_definiteness = serde_json::from_value(get(root, "leader_definiteness", "root")?.clone())?;
    Ok(GameSpec {
        dims,
        grid,
        x0: parse_vec(get(root, "x0", "root")?, "x0")?,
        dynamics,
        observations,
        follower_costs,
        leader_cost,
        leader_definiteness,
    })
}

pub fn spec_to_json(spec: &GameSpec) -> Value {
    let d = &spec.dynamics;
    let o = &spec.observations;
    json!({
        "dims": spec.dims,
        "grid": spec.grid,
        "x0": vec_json(&spec.x0),
        "dynamics": {
            "A": mat_fn_json(&d.a),
            "B1": d.b1.iter().map(mat_fn_json).collect::<Vec<_>>(),
            "B2": mat_fn_json(&d.b2),
            "alpha": vec_fn_json(&d.alpha),
            "C1": mat_fn_json(&d.c1),
            "C2": mat_fn_json(&d.c2),
        },
        "observations": {
            "f1": mat_fn_json(&o.f1), "g1": vec_fn_json(&o.g1), "K1": mat_fn_json(&o.k1),
            "f2": mat_fn_json(&o.f2), "g2": vec_fn_json(&o.g2), "K2": mat_fn_json(&o.k2),
        },
        "follower_costs": spec.follower_costs.iter().map(cost_json).collect::<Vec<_>>(),
        "leader_cost": cost_json(&spec.leader_cost),
        "leader_definiteness": spec.leader_definiteness,
    })
}

/// Loads and validates a spec file.
pub fn load_spec(path: impl AsRef<Path>) -> Result<GameSpec> {
    let text = std::fs::read_to_string(path)?;
    let root: Value = serde_json::from_str(&text)?;
    let spec = spec_from_json(&root)?;
    let violations = validate(&spec);
    if violations.is_empty() {
        Ok(spec)
    } else {
        Err(Error::Validation(violations))
    }
}

pub fn save_spec(spec: &GameSpec, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(&spec_to_json(spec))?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_dims() -> Dims {
        Dims { n: 1, m: 1, followers: 1, l1: 1, l2: 1 }
    }

    #[test]
    fn zero_game_is_valid() {
        let s = GameSpec::zeros(scalar_dims(), TimeGrid::new(1.0, 10));
        assert!(validate(&s).is_empty(), "{:?}", validate(&s));
    }

    #[test]
    fn zero_follower_weight_is_flagged() {
        let mut s = GameSpec::zeros(scalar_dims(), TimeGrid::new(1.0, 10));
        s.follower_costs[0].r = CoefficientFn::scalar(0.0);
        let v = validate(&s);
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().starts_with("R11 not positive definite at t="));
    }

    #[test]
    fn singular_k2_is_flagged() {
        let mut s = GameSpec::zeros(scalar_dims(), TimeGrid::new(1.0, 10));
        s.observations.k2 = CoefficientFn::scalar(0.0);
        let v = validate(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "K2");
        assert!(v[0].predicate.contains("singular"));
    }

    #[test]
    fn time_varying_violation_names_node() {
        let grid = TimeGrid::new(1.0, 4);
        let mut s = GameSpec::zeros(scalar_dims(), grid);
        s.follower_costs[0].r = CoefficientFn::from_fn(&grid, |t| Mat::from_element(1, 1, 0.5 - t));
        let v = validate(&s);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].node, 2);
    }

    #[test]
    fn interpolation_is_linear() {
        let grid = TimeGrid::new(1.0, 4);
        let c = CoefficientFn::from_fn(&grid, |t| Mat::from_element(1, 1, 3.0 * t));
        assert!((c.eval(0.3, &grid)[(0, 0)] - 0.9).abs() < 1e-14);
        assert!((c.eval(1.0, &grid)[(0, 0)] - 3.0).abs() < 1e-14);
    }
}
