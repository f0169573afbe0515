use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use stackelberg::cli::run_checks;
use stackelberg::equilibrium::{self, rows};
use stackelberg::formation::{run_formation_demo, triangle_example, FormationConfig};
use stackelberg::model;
use stackelberg::simulate::{run_closed_loop, LeaderPolicy, SimConfig};
use stackelberg::Error;

type Rows = Vec<Vec<f64>>;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Validation(_) | Error::Parse(_) | Error::ShapeMismatch(_) | Error::GridMismatch(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A game specification.
#[pyclass(name = "GameSpec", module = "stackelberg_py", from_py_object)]
#[derive(Clone)]
pub struct PyGameSpec {
    inner: model::GameSpec,
}

#[pymethods]
impl PyGameSpec {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(json_err)?;
        Ok(Self { inner: model::spec_from_json(&v).map_err(to_py)? })
    }

    /// The scalar benchmark game on `steps` grid intervals.
    #[staticmethod]
    #[pyo3(signature = (steps = 500))]
    fn scalar_benchmark(steps: usize) -> Self {
        Self { inner: model::scalar_benchmark(steps) }
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&model::spec_to_json(&self.inner)).map_err(json_err)
    }

    /// Violated preconditions, empty when the spec is valid.
    fn validate(&self) -> Vec<String> {
        model::validate(&self.inner).iter().map(ToString::to_string).collect()
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.dims.n
    }

    #[getter]
    fn followers(&self) -> usize {
        self.inner.dims.followers
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.grid.steps
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.inner.grid.t_end
    }

    fn __repr__(&self) -> String {
        let d = &self.inner.dims;
        format!("GameSpec(n={}, m={}, followers={}, steps={})", d.n, d.m, d.followers, self.inner.grid.steps)
    }
}

/// A solved equilibrium.
#[pyclass(name = "Equilibrium", module = "stackelberg_py")]
pub struct PyEquilibrium {
    inner: equilibrium::Equilibrium,
}

#[pymethods]
impl PyEquilibrium {
    #[staticmethod]
    fn solve(py: Python<'_>, spec: &PyGameSpec) -> PyResult<Self> {
        let spec = spec.inner.clone();
        let inner = py.detach(|| equilibrium::solve_equilibrium(&spec)).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Costs, convergence report and gains at t = 0, as JSON.
    fn summary(&self) -> PyResult<String> {
        let s = self.inner.summary().map_err(to_py)?;
        serde_json::to_string_pretty(&s).map_err(json_err)
    }

    fn times(&self) -> Vec<f64> {
        self.inner.spec.grid.times()
    }

    /// Leader feedback (state gain, h gain, affine term) at node k.
    fn leader_gains(&self, k: usize) -> PyResult<(Rows, Rows, Rows)> {
        let f = &self.inner.feedback;
        if k >= f.gx.values.len() {
            return Err(PyValueError::new_err(format!("node {k} out of range")));
        }
        Ok((rows(f.gx.at(k)), rows(f.gh.at(k)), rows(f.affine.at(k))))
    }

    /// Riccati solution of follower i on every node.
    fn follower_riccati(&self, i: usize) -> PyResult<Vec<Rows>> {
        let f = self.inner.followers.get(i).ok_or_else(|| PyValueError::new_err(format!("no follower {i}")))?;
        Ok(f.p.values.iter().map(rows).collect())
    }

    /// (P1, P2, P3) of the leader on every node.
    fn leader_riccati(&self) -> (Vec<Rows>, Vec<Rows>, Vec<Rows>) {
        let s = &self.inner.stack;
        let all = |t: &stackelberg::odesolve::MatrixTrajectory| t.values.iter().map(rows).collect();
        (all(&s.p1), all(&s.p2), all(&s.p3))
    }

    /// Closed-form leader cost; needs the regularized stack.
    fn leader_cost(&self) -> PyResult<f64> {
        Ok(self.inner.leader_cost().map_err(to_py)?.total)
    }

    /// Invariant suite as (name, value, tolerance, passed) rows.
    fn check(&self) -> Vec<(String, f64, f64, bool)> {
        run_checks(&self.inner).into_iter().map(|r| (r.name, r.value, r.tolerance, r.passed)).collect()
    }

    /// Monte Carlo run under the equilibrium strategies; returns the result as JSON.
    #[pyo3(signature = (paths = 10_000, seed = 0, antithetic = false))]
    fn simulate(&self, py: Python<'_>, paths: usize, seed: u64, antithetic: bool) -> PyResult<String> {
        let mut cfg = SimConfig::new(paths, seed);
        cfg.antithetic = antithetic;
        let eq = &self.inner;
        let r = py.detach(|| run_closed_loop(eq, &LeaderPolicy::Equilibrium, &cfg)).map_err(to_py)?;
        r.to_json().map_err(to_py)
    }
}

/// Formation demo. Runs the built-in three-robot example unless a JSON config is given, and
/// returns (times, mean formation error, leader cost mean).
#[pyfunction]
#[pyo3(signature = (config = None, noise = 0.3, steps = 500, paths = 200, seed = 0))]
fn formation(
    py: Python<'_>,
    config: Option<&str>,
    noise: f64,
    steps: usize,
    paths: usize,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<f64>, f64)> {
    let cfg: FormationConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(json_err)?,
        None => triangle_example(noise, steps),
    };
    let obs = cfg.observations().map_err(to_py)?;
    let demo = py.detach(|| run_formation_demo(&cfg.spec, &obs, &SimConfig::new(paths.max(1), seed))).map_err(to_py)?;
    let (t, e) = demo.trace.iter().map(|p| (p[0], p[1])).unzip();
    Ok((t, e, demo.sim.leader_cost.mean))
}

#[pymodule]
fn stackelberg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGameSpec>()?;
    m.add_class::<PyEquilibrium>()?;
    m.add_function(wrap_pyfunction!(formation, m)?)?;
    Ok(())
}
