//! Python bindings: the main types and operations of the toolkit.
//!
//! Build with `cargo build -p hypotube-py --release` and import the cdylib
//! as `hypotube` (see `python/smoke_test.py` for the copy-and-import dance,
//! or use maturin in a real deployment).

use std::collections::BTreeMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hypotube::bounds::{BoundConstants, GridMode, TubeSpec};
use hypotube::exprdsl;
use hypotube::geometry;
use hypotube::metrics;
use hypotube::models::{self, ModelSpec};
use hypotube::montecarlo;
use hypotube::skeleton::{integrate_skeleton, Control, TimeFn};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A built-in or DSL-defined diffusion model.
#[pyclass]
struct Model {
    spec: ModelSpec,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (name, params=None))]
    fn new(name: &str, params: Option<BTreeMap<String, String>>) -> PyResult<Self> {
        let params = params.unwrap_or_default();
        Ok(Model {
            spec: models::instantiate_model(name, &params).map_err(err)?,
        })
    }

    /// (state dimension, noise dimension)
    fn dims(&self) -> (usize, usize) {
        (self.spec.fields.dim_state(), self.spec.fields.dim_noise())
    }

    fn default_start(&self) -> Vec<f64> {
        self.spec.x0.clone()
    }

    /// Scaled Gram matrix A_R A_R^T at x.
    #[pyo3(signature = (x, r, t=0.0))]
    fn gram(&self, x: Vec<f64>, r: f64, t: f64) -> PyResult<Vec<Vec<f64>>> {
        let frame = geometry::assemble_frame(&self.spec.fields, t, &x)
            .map_err(err)?
            .scaled(r)
            .map_err(err)?;
        let n = frame.dim();
        Ok((0..n).map(|i| frame.gram.row(i).to_vec()).collect())
    }

    /// Anisotropic norm |y|_{A_R(t,x)}.
    #[pyo3(signature = (x, r, y, t=0.0))]
    fn aniso_norm(&self, x: Vec<f64>, r: f64, y: Vec<f64>, t: f64) -> PyResult<f64> {
        geometry::assemble_frame(&self.spec.fields, t, &x)
            .map_err(err)?
            .scaled(r)
            .map_err(err)?
            .norm(&y)
            .map_err(err)
    }

    /// Smallest/largest singular value and sqrt(det Gram) of the scaled frame.
    #[pyo3(signature = (x, r, t=0.0))]
    fn spectral<'py>(&self, py: Python<'py>, x: Vec<f64>, r: f64, t: f64) -> PyResult<Bound<'py, PyDict>> {
        let frame = geometry::assemble_frame(&self.spec.fields, t, &x)
            .map_err(err)?
            .scaled(r)
            .map_err(err)?;
        let sp = frame.spectral();
        let out = PyDict::new(py);
        out.set_item("sv_min", sp.sv_min)?;
        out.set_item("sv_max", sp.sv_max)?;
        out.set_item("sqrt_det_gram", sp.sqrt_det_gram)?;
        Ok(out)
    }

    /// Lie bracket [sigma_i, sigma_p](t,x), 1-based indices.
    #[pyo3(signature = (i, p, x, t=0.0))]
    fn lie_bracket(&self, i: usize, p: usize, x: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
        self.spec.fields.lie_bracket(i, p, t, &x).map_err(err)
    }

    /// Sampled local derivative bound n(t,x).
    #[pyo3(signature = (x, grid_points=21, t=0.0))]
    fn local_bound(&self, x: Vec<f64>, grid_points: usize, t: f64) -> PyResult<f64> {
        self.spec.fields.local_bound(t, &x, grid_points).map_err(err)
    }

    /// Integrate the skeleton ODE; returns (times, states).
    #[pyo3(signature = (x0, horizon, steps=256, phi=None))]
    fn skeleton(
        &self,
        x0: Vec<f64>,
        horizon: f64,
        steps: usize,
        phi: Option<Vec<f64>>,
    ) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let d = self.spec.fields.dim_noise();
        let ctrl = match phi {
            Some(v) => Control::constant(d, horizon, &v).map_err(err)?,
            None => Control::zero(d, horizon),
        };
        let sk = integrate_skeleton(&self.spec.fields, &ctrl, &x0, steps).map_err(err)?;
        let states = (0..sk.len()).map(|k| sk.state(k).to_vec()).collect();
        Ok((sk.times().to_vec(), states))
    }

    /// Monte Carlo tube probability around the zero-control skeleton.
    #[pyo3(signature = (horizon, radius, paths, steps, seed, x0=None))]
    fn tube_probability<'py>(
        &self,
        py: Python<'py>,
        horizon: f64,
        radius: f64,
        paths: usize,
        steps: usize,
        seed: u64,
        x0: Option<Vec<f64>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let x0 = x0.unwrap_or_else(|| self.spec.x0.clone());
        let ctrl = Control::zero(self.spec.fields.dim_noise(), horizon);
        let skel = integrate_skeleton(&self.spec.fields, &ctrl, &x0, 64).map_err(err)?;
        let est = montecarlo::tube_probability(
            &self.spec.fields,
            &x0,
            &skel,
            &TimeFn::constant(radius),
            horizon,
            paths,
            steps,
            seed,
        )
        .map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("p_hat", est.p_hat)?;
        out.set_item("std_err", est.std_err)?;
        out.set_item("ci95", est.ci95)?;
        out.set_item("n_inside", est.n_inside)?;
        out.set_item("n_blowups", est.n_blowups)?;
        out.set_item("n_paths", est.n_paths)?;
        out.set_item("n_steps", est.n_steps)?;
        out.set_item("seed", est.seed)?;
        Ok(out)
    }

    /// Exponential lower/upper bounds for the tube probability.
    #[pyo3(signature = (horizon, radius))]
    fn tube_bounds<'py>(&self, py: Python<'py>, horizon: f64, radius: f64) -> PyResult<Bound<'py, PyDict>> {
        let tube = TubeSpec::new(
            self.spec.envelope.clone(),
            TimeFn::constant(radius),
            BoundConstants::default(),
            Control::zero(self.spec.fields.dim_noise(), horizon),
        )
        .map_err(err)?;
        let s = tube.tube_bounds().map_err(err)?;
        let grid = tube.time_grid(GridMode::Lower).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("lower", s.lower)?;
        out.set_item("upper", s.upper)?;
        out.set_item("lower_general", s.lower_general)?;
        out.set_item("r_star_ok", s.r_star_ok)?;
        out.set_item("grid_cells", grid.full_cells())?;
        Ok(out)
    }

    /// Quasi-distance d(x,y) from the norm family.
    #[pyo3(signature = (x, y, tol=1e-9))]
    fn quasi_distance(&self, x: Vec<f64>, y: Vec<f64>, tol: f64) -> PyResult<f64> {
        Ok(metrics::quasi_distance(&self.spec.fields, &x, &y, tol)
            .map_err(err)?
            .value)
    }

    /// Carathéodory control distance; returns (d_c, endpoint_gap, converged).
    #[pyo3(signature = (x, y, n_pieces=64, restarts=3, seed=0x5eed))]
    fn caratheodory_distance(
        &self,
        x: Vec<f64>,
        y: Vec<f64>,
        n_pieces: usize,
        restarts: usize,
        seed: u64,
    ) -> PyResult<(f64, f64, bool)> {
        let prob = metrics::ControlProblem {
            n_pieces,
            restarts,
            seed,
            ..metrics::ControlProblem::new(&self.spec.fields, &x, &y).map_err(err)?
        };
        let dc = metrics::caratheodory_distance(&prob).map_err(err)?;
        Ok((dc.d_c, dc.endpoint_gap, dc.converged))
    }

    /// Constant-control distance d_*; returns (value, endpoint_residual).
    fn nsw_distance(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64)> {
        let res = metrics::nsw_distance(&self.spec.fields, &x, &y).map_err(err)?;
        Ok((res.value, res.endpoint_residual))
    }
}

/// Parse a DSL expression and return its printed normal form.
#[pyfunction]
fn parse_expr(source: &str, dim: usize) -> PyResult<String> {
    Ok(exprdsl::parse_expr(source, dim).map_err(err)?.to_string())
}

/// Evaluate a DSL expression at (t, x).
#[pyfunction]
#[pyo3(signature = (source, x, t=0.0))]
fn eval_expr(source: &str, x: Vec<f64>, t: f64) -> PyResult<f64> {
    exprdsl::parse_expr(source, x.len())
        .map_err(err)?
        .eval(t, &x)
        .map_err(err)
}

/// P(sup_{t<=T} |W_t| <= a) by the 10-term reflection series.
#[pyfunction]
#[pyo3(signature = (horizon, barrier, terms=10))]
fn bm_series(horizon: f64, barrier: f64, terms: usize) -> f64 {
    models::bm_sup_prob_series(horizon, barrier, terms)
}

#[pymodule]
#[pyo3(name = "hypotube")]
fn hypotube_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(parse_expr, m)?)?;
    m.add_function(wrap_pyfunction!(eval_expr, m)?)?;
    m.add_function(wrap_pyfunction!(bm_series, m)?)?;
    Ok(())
}
