//! Python bindings for the `brittle-homog` toolkit.
//!
//! Structured results are returned as plain dicts built from the JSON form of the Rust
//! types, so field names match the serialized records.

use std::path::PathBuf;

use brittle_homog::cell_corrector::{self, CellProblem};
use brittle_homog::cli_io::{self, RunConfig, RunOptions};
use brittle_homog::microgeometry::{self, MicrostructureSpec, RegionLabel};
use brittle_homog::regimes::{self, Mode, RegimePlan};
use brittle_homog::sbv_lattice::{recovery_constant as rc, SolverOptions};
use brittle_homog::surface_mincut::{self, maxflow, Stencil};
use brittle_homog::Error;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde::Serialize;

fn err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_mode(mode: &str, ell: f64) -> PyResult<Mode> {
    match mode {
        "sub" => Ok(Mode::Sub),
        "super" => Ok(Mode::Super),
        "critical" => Ok(Mode::Critical(ell)),
        other => Err(PyValueError::new_err(format!("unknown mode '{other}'"))),
    }
}

/// Label of a point of the perforated domain: "matrix" or "inclusion".
#[pyfunction]
#[pyo3(signature = (x, n, a, eps, domain_len=1.0))]
fn classify_point(x: Vec<f64>, n: usize, a: f64, eps: f64, domain_len: f64) -> PyResult<&'static str> {
    let spec = MicrostructureSpec::new(n, a, eps, domain_len).map_err(err)?;
    if x.len() != n {
        return Err(PyValueError::new_err(format!("point must have {n} components")));
    }
    Ok(match microgeometry::classify_point(&x, &spec) {
        RegionLabel::Matrix => "matrix",
        RegionLabel::Inclusion => "inclusion",
    })
}

/// Cell energy `fhat(xi)` at resolution `m`, with solver diagnostics.
#[pyfunction]
#[pyo3(signature = (xi, a, m, tol=1e-12))]
fn solve_cell(py: Python<'_>, xi: Vec<f64>, a: f64, m: usize, tol: f64) -> PyResult<Py<PyAny>> {
    let p = CellProblem { tol, ..CellProblem::new(xi, a, m) };
    let c = py.detach(|| cell_corrector::solve_cell(&p)).map_err(err)?;
    to_py(
        py,
        &serde_json::json!({"fhat": c.fhat, "residual": c.residual, "iterations": c.iterations, "converged": c.converged}),
    )
}

/// Richardson-extrapolated `fhat(xi)` over a resolution chain.
#[pyfunction]
fn fhat_extrapolated(py: Python<'_>, xi: Vec<f64>, a: f64, m_list: Vec<usize>) -> PyResult<Py<PyAny>> {
    let (ex, fields) = py.detach(|| cell_corrector::fhat_extrapolated(&xi, a, &m_list)).map_err(err)?;
    let values: Vec<f64> = fields.iter().map(|c| c.fhat).collect();
    to_py(py, &serde_json::json!({"value": ex.value, "order": ex.order, "spread": ex.spread, "values": values}))
}

/// Homogenized tensor `A` with `fhat(xi) = xi . A xi`.
#[pyfunction]
#[pyo3(signature = (a, n, m_list, seed=7))]
fn homogenized_tensor(py: Python<'_>, a: f64, n: usize, m_list: Vec<usize>, seed: u64) -> PyResult<Py<PyAny>> {
    let t = py.detach(|| cell_corrector::assemble_tensor(a, n, &m_list, seed)).map_err(err)?;
    to_py(py, &t)
}

/// Surface density `ghat(nu)` along a chain of cube sizes.
#[pyfunction]
#[pyo3(signature = (nu, a, t_chain, m, stencil="axis"))]
fn estimate_ghat(py: Python<'_>, nu: Vec<f64>, a: f64, t_chain: Vec<f64>, m: usize, stencil: &str) -> PyResult<Py<PyAny>> {
    let stencil: Stencil = stencil.parse().map_err(err)?;
    let g = py.detach(|| surface_mincut::estimate_ghat(&nu, a, &t_chain, m, stencil)).map_err(err)?;
    to_py(py, &g)
}

/// Minimum s-t cut of a capacitated graph given as `(u, v, cap_uv, cap_vu)` edges.
/// Returns `(cost, flow, source_side)`.
#[pyfunction]
fn min_cut(num_nodes: usize, source: usize, sink: usize, edges: Vec<(usize, usize, f64, f64)>) -> PyResult<(f64, f64, Vec<bool>)> {
    if source >= num_nodes || sink >= num_nodes || source == sink {
        return Err(PyValueError::new_err("source and sink must be distinct nodes"));
    }
    let mut g = maxflow::FlowGraph::new(num_nodes, source, sink);
    for (u, v, c1, c2) in edges {
        if u >= num_nodes || v >= num_nodes || !(c1 >= 0.0 && c2 >= 0.0) {
            return Err(PyValueError::new_err(format!("invalid edge ({u}, {v}, {c1}, {c2})")));
        }
        g.add_edge(u, v, c1, c2);
    }
    let r = maxflow::min_cut(g);
    Ok((r.cost, r.flow_certificate, r.source_side))
}

/// Constant of the recovery construction's surface term.
#[pyfunction]
fn recovery_constant(n: usize, a: f64) -> f64 {
    rc(n, a)
}

/// Experiment plan for one scaling regime.
#[pyclass(name = "Plan")]
struct PyPlan {
    plan: RegimePlan,
}

#[pymethods]
impl PyPlan {
    #[new]
    #[pyo3(signature = (mode="critical", ell=1.0, n=2, a=0.25, domain_len=1.0, eps_chain=vec![0.25, 0.125, 0.0625], m=16))]
    fn new(mode: &str, ell: f64, n: usize, a: f64, domain_len: f64, eps_chain: Vec<f64>, m: usize) -> PyResult<Self> {
        let plan = RegimePlan { mode: parse_mode(mode, ell)?, n, a, domain_len, eps_chain, m, solver: SolverOptions::default() };
        plan.validate().map_err(err)?;
        Ok(Self { plan })
    }

    #[getter]
    fn mode(&self) -> String {
        self.plan.mode.to_string()
    }

    #[getter]
    fn eps_chain(&self) -> Vec<f64> {
        self.plan.eps_chain.clone()
    }

    /// Bulk density `f_hom(xi)` from affine-data minimizers along the chain.
    fn estimate_f(&self, py: Python<'_>, xi: Vec<f64>) -> PyResult<Py<PyAny>> {
        let e = py.detach(|| regimes::estimate_f(&xi, &self.plan)).map_err(err)?;
        to_py(py, &e)
    }

    /// Surface density from step-data minimizers of height `z` across `nu`.
    #[pyo3(signature = (z, nu, ghat=None))]
    fn estimate_g(&self, py: Python<'_>, z: f64, nu: Vec<f64>, ghat: Option<f64>) -> PyResult<Py<PyAny>> {
        let e = py.detach(|| regimes::estimate_g(z, &nu, &self.plan, ghat)).map_err(err)?;
        to_py(py, &e)
    }

    /// Ratio table `f_est(lambda xi) / lambda^2`.
    fn homogeneity_profile(&self, py: Python<'_>, xi: Vec<f64>, lambdas: Vec<f64>) -> PyResult<Py<PyAny>> {
        let p = py.detach(|| regimes::homogeneity_profile(&xi, &lambdas, &self.plan)).map_err(err)?;
        to_py(py, &p)
    }

    fn __repr__(&self) -> String {
        format!("Plan(mode={}, n={}, a={}, L={}, eps_chain={:?}, M={})", self.plan.mode, self.plan.n, self.plan.a, self.plan.domain_len, self.plan.eps_chain, self.plan.m)
    }
}

/// Runs a CLI subcommand on config text. Returns `(exit_code, files, warnings)`.
#[pyfunction]
#[pyo3(signature = (subcommand, config_text, output, force=false))]
fn run(py: Python<'_>, subcommand: &str, config_text: &str, output: PathBuf, force: bool) -> PyResult<(i32, Vec<PathBuf>, Vec<String>)> {
    let cfg = RunConfig::parse(config_text).map_err(err)?;
    let opts = RunOptions { output, cache_dir: None, force };
    let out = py.detach(|| cli_io::run(subcommand, &cfg, &opts)).map_err(err)?;
    Ok((out.exit_code, out.files, out.warnings))
}

#[pymodule]
fn brittle_homog_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", cli_io::VERSION)?;
    m.add_class::<PyPlan>()?;
    m.add_function(wrap_pyfunction!(classify_point, m)?)?;
    m.add_function(wrap_pyfunction!(solve_cell, m)?)?;
    m.add_function(wrap_pyfunction!(fhat_extrapolated, m)?)?;
    m.add_function(wrap_pyfunction!(homogenized_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_ghat, m)?)?;
    m.add_function(wrap_pyfunction!(min_cut, m)?)?;
    m.add_function(wrap_pyfunction!(recovery_constant, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
