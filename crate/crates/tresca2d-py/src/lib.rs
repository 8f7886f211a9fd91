//! Python bindings: mesh generation, the friction solve, shape gradients and
//! the optimization loop, exposed with plain lists/dicts so the module has no
//! numpy dependency. Build the cdylib and import it as `tresca2d_py`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use tresca2d::expr::parse_expression;
use tresca2d::fem::VectorField;
use tresca2d::mesh::{self, BoundaryTag};
use tresca2d::optim::{run_optimization, OptimConfig};
use tresca2d::shape::{
    boundary_gradient_form, descent_direction, fd_gradient_check, seeded_boundary_direction,
    shape_gradient_report, ShapeContext,
};
use tresca2d::tresca::{
    classify_boundary, solve_tresca_with, ContactMode, Discretization, ProblemData,
};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// A triangulated domain with a tagged boundary.
#[pyclass(name = "Mesh")]
struct PyMesh {
    inner: mesh::Mesh,
}

#[pymethods]
impl PyMesh {
    /// Ellipse mesh: semi-axes `a`, `b`, target edge length `h`, clamped
    /// boundary arcs given as `[(lo, hi)]` in radians.
    #[staticmethod]
    fn ellipse(a: f64, b: f64, h: f64, dirichlet_arcs: Vec<(f64, f64)>) -> PyResult<Self> {
        let inner = mesh::generate_ellipse_mesh(a, b, h, &dirichlet_arcs)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyMesh { inner })
    }

    /// Structured unit-square mesh with the left edge clamped.
    #[staticmethod]
    fn unit_square(n: usize) -> PyResult<Self> {
        let inner = mesh::rectangle_mesh(n, n, 1.0, 1.0, &[mesh::Side::Left])
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyMesh { inner })
    }

    #[getter]
    fn num_vertices(&self) -> usize {
        self.inner.num_vertices()
    }

    #[getter]
    fn num_triangles(&self) -> usize {
        self.inner.num_triangles()
    }

    fn area(&self) -> f64 {
        mesh::area(&self.inner)
    }

    /// `(min angle in radians, max aspect ratio)`.
    fn quality(&self) -> (f64, f64) {
        mesh::mesh_quality(&self.inner)
    }

    fn vertices(&self) -> Vec<(f64, f64)> {
        self.inner.vertices().iter().map(|p| (p[0], p[1])).collect()
    }

    fn triangles(&self) -> Vec<(usize, usize, usize)> {
        self.inner.triangles().iter().map(|t| (t[0], t[1], t[2])).collect()
    }

    /// Boundary vertex ids in counterclockwise order.
    fn boundary_loop(&self) -> Vec<usize> {
        self.inner.boundary_loop().to_vec()
    }

    /// Per-vertex tag: "dirichlet", "tresca" or None for interior vertices.
    fn node_tag(&self, v: usize) -> Option<&'static str> {
        self.inner.node_tag(v).map(|t| match t {
            BoundaryTag::Dirichlet => "dirichlet",
            BoundaryTag::Tresca => "tresca",
        })
    }
}

/// Body force, friction threshold and material parameters.
#[pyclass(name = "Problem", skip_from_py_object)]
#[derive(Clone)]
struct PyProblem {
    inner: ProblemData,
}

#[pymethods]
impl PyProblem {
    /// Expressions use the variables `x`, `y`, the constant `pi` and the
    /// functions sin, cos, exp, sqrt, abs.
    #[new]
    fn new(f_x: &str, f_y: &str, g: &str, mu: f64, lambda: f64) -> PyResult<Self> {
        let parse = |s: &str| parse_expression(s).map_err(|e| PyValueError::new_err(e.to_string()));
        Ok(PyProblem {
            inner: ProblemData::new([parse(f_x)?, parse(f_y)?], parse(g)?, mu, lambda),
        })
    }

    /// The built-in toy data set on the ellipse.
    #[staticmethod]
    fn toy() -> Self {
        PyProblem { inner: ProblemData::toy() }
    }
}

fn mode_name(m: ContactMode) -> &'static str {
    match m {
        ContactMode::StickStrict => "STICK_STRICT",
        ContactMode::StickBoundary => "STICK_BOUNDARY",
        ContactMode::Slip => "SLIP",
    }
}

/// Solve the friction problem. Returns a dict with the displacement,
/// energy and per-frictional-node contact data.
#[pyfunction]
fn solve(py: Python<'_>, mesh: &PyMesh, problem: &PyProblem) -> PyResult<Py<PyDict>> {
    let disc = Discretization::build(&mesh.inner, &problem.inner).map_err(err)?;
    let (u, state) = solve_tresca_with(&mesh.inner, &problem.inner, &disc, None).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item(
        "displacement",
        u.values().iter().map(|v| (v[0], v[1])).collect::<Vec<_>>(),
    )?;
    out.set_item("energy", disc.energy(u.values()))?;
    out.set_item("switch_iters", state.switch_iters)?;
    out.set_item("contact_nodes", state.nodes.clone())?;
    out.set_item(
        "contact_mode",
        state.mode.iter().map(|m| mode_name(*m)).collect::<Vec<_>>(),
    )?;
    out.set_item("sigma_n", state.sigma_n.clone())?;
    out.set_item("s_tau", state.s_tau.clone())?;
    out.set_item("u_tau", state.u_tau.clone())?;
    let part = classify_boundary(&state);
    out.set_item("slipping", part.slipping)?;
    out.set_item("stick_strict", part.stick_strict)?;
    out.set_item("stick_boundary", part.stick_boundary)?;
    Ok(out.into())
}

/// Shape gradient of the energy for a seeded smooth boundary direction.
/// Returns both analytic forms, the per-term breakdown and, when `t_list` is
/// given, the finite-difference quotients.
#[pyfunction]
#[pyo3(signature = (mesh, problem, seed, t_list = None))]
fn gradient_report(
    py: Python<'_>,
    mesh: &PyMesh,
    problem: &PyProblem,
    seed: u64,
    t_list: Option<Vec<f64>>,
) -> PyResult<Py<PyDict>> {
    let disc = Discretization::build(&mesh.inner, &problem.inner).map_err(err)?;
    let (u0, state) = solve_tresca_with(&mesh.inner, &problem.inner, &disc, None).map_err(err)?;
    let cx = ShapeContext::build(&mesh.inner, &problem.inner, &disc, &u0, &state).map_err(err)?;
    let theta = seeded_boundary_direction(&mesh.inner, seed).map_err(err)?;
    let report = shape_gradient_report(&cx, &theta).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("value_boundary", report.value_boundary)?;
    out.set_item("value_volume", report.value_volume)?;
    out.set_item("theta_norm_h1", report.theta_norm_h1)?;
    let terms = PyDict::new(py);
    for (k, v) in &report.terms {
        terms.set_item(k, v)?;
    }
    out.set_item("terms", terms)?;
    if let Some(ts) = t_list {
        let rows = fd_gradient_check(&mesh.inner, &problem.inner, &theta, &ts).map_err(err)?;
        out.set_item(
            "fd",
            rows.iter()
                .map(|r| (r.t, r.fd_quotient, r.rel_err_boundary, r.rel_err_volume))
                .collect::<Vec<_>>(),
        )?;
    }
    Ok(out.into())
}

/// One H1 descent direction for the current shape; returns the nodal field
/// and the gradient value along it (which equals minus its squared H1 norm).
#[pyfunction]
fn descent_field(py: Python<'_>, mesh: &PyMesh, problem: &PyProblem) -> PyResult<Py<PyDict>> {
    let disc = Discretization::build(&mesh.inner, &problem.inner).map_err(err)?;
    let (u0, state) = solve_tresca_with(&mesh.inner, &problem.inner, &disc, None).map_err(err)?;
    let cx = ShapeContext::build(&mesh.inner, &problem.inner, &disc, &u0, &state).map_err(err)?;
    let form = boundary_gradient_form(&cx).map_err(err)?.total();
    let theta0 =
        descent_direction(&mesh.inner, &form, problem.inner.lin_tol, problem.inner.lin_max_iter)
            .map_err(err)?;
    let out = PyDict::new(py);
    out.set_item(
        "theta",
        theta0.values().iter().map(|v| (v[0], v[1])).collect::<Vec<_>>(),
    )?;
    out.set_item("gradient_value", form.eval(theta0.values()))?;
    Ok(out.into())
}

/// Run the volume-constrained descent loop. Returns the history rows and the
/// final mesh.
#[pyfunction]
#[pyo3(signature = (mesh, problem, target_volume, max_iters = 50))]
fn optimize(
    py: Python<'_>,
    mesh: &PyMesh,
    problem: &PyProblem,
    target_volume: f64,
    max_iters: usize,
) -> PyResult<Py<PyDict>> {
    let h = {
        // use the median boundary edge length as the step scale
        let frame = mesh::boundary_frame(&mesh.inner);
        let mut w: Vec<f64> = frame.weight.clone();
        w.sort_by(|a, b| a.partial_cmp(b).unwrap());
        w[w.len() / 2]
    };
    let mut cfg = OptimConfig::defaults_for(h);
    cfg.target_volume = target_volume;
    cfg.max_outer_iters = max_iters;
    let (final_mesh, history) =
        run_optimization(&mesh.inner, &problem.inner, &cfg, None).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item(
        "history",
        history
            .records
            .iter()
            .map(|r| (r.iter, r.energy, r.volume, r.multiplier, r.step))
            .collect::<Vec<_>>(),
    )?;
    out.set_item("final_mesh", PyMesh { inner: final_mesh }.into_pyobject(py)?)?;
    Ok(out.into())
}

/// Evaluate an expression of `x` and `y`.
#[pyfunction]
fn eval_expression(text: &str, x: f64, y: f64) -> PyResult<f64> {
    let e = parse_expression(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    e.eval(x, y).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Energy of an arbitrary nodal displacement field (for cross-checks).
#[pyfunction]
fn field_energy(mesh: &PyMesh, problem: &PyProblem, values: Vec<(f64, f64)>) -> PyResult<f64> {
    if values.len() != mesh.inner.num_vertices() {
        return Err(PyValueError::new_err("field length must match vertex count"));
    }
    let field = VectorField::from_values(
        &mesh.inner,
        values.into_iter().map(|(a, b)| [a, b]).collect(),
    );
    tresca2d::tresca::energy(&mesh.inner, &problem.inner, &field).map_err(err)
}

#[pymodule]
fn tresca2d_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMesh>()?;
    m.add_class::<PyProblem>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_report, m)?)?;
    m.add_function(wrap_pyfunction!(descent_field, m)?)?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    m.add_function(wrap_pyfunction!(eval_expression, m)?)?;
    m.add_function(wrap_pyfunction!(field_energy, m)?)?;
    Ok(())
}
