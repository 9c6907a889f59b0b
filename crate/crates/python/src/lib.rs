//! Python bindings. Points cross the boundary as lists of `[x, y, z]` and
//! must be unit length within 1e-6.

use std::path::PathBuf;

use nalgebra::Vector3;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sphere_diffeo::baselines::{fit_projective, fit_rotation, ProjectiveFitConfig};
use sphere_diffeo::diffeo::SphereMap;
use sphere_diffeo::estimator::{self, FitConfig, FitTrace, RoughnessGradient};
use sphere_diffeo::evaluate::{self, CvPlan, Pair, Role};
use sphere_diffeo::io::{self, AnyModel, ModelMetadata};
use sphere_diffeo::roughness::{deform_grid, roughness_report, DEFAULT_POLE_OFFSET, REPORT_RESOLUTION};
use sphere_diffeo::simulate::{generate_dataset, SimProtocol};
use sphere_diffeo::sphere::UnitVector3;
use sphere_diffeo::Error;

type Point = [f64; 3];

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e if e.is_numerical() => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn unit(p: &Point) -> PyResult<UnitVector3> {
    io::near_unit(Vector3::new(p[0], p[1], p[2])).map_err(to_py)
}

fn units(ps: &[Point]) -> PyResult<Vec<UnitVector3>> {
    ps.iter().map(unit).collect()
}

fn points(us: &[UnitVector3]) -> Vec<Point> {
    us.iter().map(|u| (*u.as_vector()).into()).collect()
}

fn pairs(x: &[Point], y: &[Point]) -> PyResult<Vec<Pair>> {
    if x.len() != y.len() {
        return Err(to_py(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        }));
    }
    x.iter()
        .zip(y)
        .map(|(a, b)| Ok(Pair { x: unit(a)?, y: unit(b)? }))
        .collect()
}

fn gradient(name: &str) -> PyResult<RoughnessGradient> {
    match name {
        "fd" => Ok(RoughnessGradient::ForwardDifference),
        "adjoint" => Ok(RoughnessGradient::Adjoint),
        other => Err(PyValueError::new_err(format!("gradient must be 'fd' or 'adjoint', got {other:?}"))),
    }
}

/// A fitted model: diffeomorphic, rotation or projective.
#[pyclass(module = "spherediffeo", frozen)]
struct Model {
    inner: AnyModel,
    meta: ModelMetadata,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, meta) = io::read_model(&path).map_err(to_py)?;
        Ok(Self { inner, meta })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::write_model(&path, &self.inner, &self.meta).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        io::model_to_json(&self.inner, &self.meta).map_err(to_py)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant()
    }

    /// Number of harmonic steps; 0 for baselines.
    #[getter]
    fn n_steps(&self) -> usize {
        match &self.inner {
            AnyModel::Diffeo(m) => m.steps().len(),
            _ => 0,
        }
    }

    #[getter]
    fn degree(&self) -> Option<usize> {
        match &self.inner {
            AnyModel::Diffeo(m) => Some(m.spec().max_degree()),
            _ => None,
        }
    }

    fn predict(&self, py: Python<'_>, x: Vec<Point>) -> PyResult<Vec<Point>> {
        let xs = units(&x)?;
        Ok(py.detach(|| points(&estimator::predict(&self.inner, &xs))))
    }

    /// `(Q, R)` on an `m_grid` polar grid.
    #[pyo3(signature = (m_grid = REPORT_RESOLUTION, delta_pole = DEFAULT_POLE_OFFSET))]
    fn roughness(&self, py: Python<'_>, m_grid: usize, delta_pole: f64) -> PyResult<(f64, f64)> {
        py.detach(|| {
            let rep = roughness_report(&deform_grid(&self.inner, m_grid, delta_pole)?);
            Ok((rep.q, rep.r))
        })
        .map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Model(variant={:?}, steps={})", self.inner.variant(), self.n_steps())
    }
}

fn trace_rows(t: &FitTrace) -> Vec<(usize, f64, f64, f64, f64)> {
    std::iter::once(&t.initial)
        .chain(&t.records)
        .map(|r| (r.iter, r.objective, r.likelihood, r.roughness, r.grad_norm))
        .collect()
}

/// Penalized fit; returns the model and trace rows `(iter, E, f_n, R, |d|)`.
#[pyfunction]
#[pyo3(signature = (
    x, y, *, lam = 1e-3, degree = 3, step = 0.05, eps = 1e-4, m_grid = 100,
    delta_pole = DEFAULT_POLE_OFFSET, max_iters = 2000, tol = 1e-6, seed = 0, gradient = "fd"
))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    x: Vec<Point>,
    y: Vec<Point>,
    lam: f64,
    degree: usize,
    step: f64,
    eps: f64,
    m_grid: usize,
    delta_pole: f64,
    max_iters: usize,
    tol: f64,
    seed: u64,
    gradient: &str,
) -> PyResult<(Model, Vec<(usize, f64, f64, f64, f64)>)> {
    let data = pairs(&x, &y)?;
    let cfg = FitConfig {
        lambda: lam,
        degree,
        step,
        eps,
        grid: m_grid,
        pole_offset: delta_pole,
        max_iters,
        tol,
        seed,
        roughness_gradient: self::gradient(gradient)?,
    };
    let (m, trace) = py.detach(|| estimator::fit(&data, &cfg)).map_err(to_py)?;
    let meta = ModelMetadata {
        seed: Some(seed),
        lambda: Some(lam),
        created: None,
    };
    Ok((Model { inner: AnyModel::Diffeo(m), meta }, trace_rows(&trace)))
}

/// Rigid-rotation baseline.
#[pyfunction]
#[pyo3(name = "fit_rotation")]
fn py_fit_rotation(x: Vec<Point>, y: Vec<Point>) -> PyResult<Model> {
    let m = fit_rotation(&pairs(&x, &y)?).map_err(to_py)?;
    Ok(Model {
        inner: AnyModel::Rotation(m),
        meta: ModelMetadata::default(),
    })
}

/// Projective-linear baseline `x ↦ Px/|Px|`.
#[pyfunction]
#[pyo3(name = "fit_projective")]
fn py_fit_projective(x: Vec<Point>, y: Vec<Point>) -> PyResult<Model> {
    let m = fit_projective(&pairs(&x, &y)?, &ProjectiveFitConfig::default()).map_err(to_py)?;
    Ok(Model {
        inner: AnyModel::Projective(m),
        meta: ModelMetadata::default(),
    })
}

/// Synthetic dataset `(x_train, y_train, x_test, y_test)` from a named map.
#[pyfunction]
#[pyo3(signature = (seed, truth = "composite", n_train = 200, n_test = 100))]
fn simulate(seed: u64, truth: &str, n_train: usize, n_test: usize) -> PyResult<(Vec<Point>, Vec<Point>, Vec<Point>, Vec<Point>)> {
    let truth = io::resolve_map(truth, seed).map_err(to_py)?;
    let ds = generate_dataset(&SimProtocol {
        n_train,
        n_test,
        ..SimProtocol::standard(truth, seed)
    })
    .map_err(to_py)?;
    let split = |role| {
        let p = ds.subset(role);
        let xs: Vec<UnitVector3> = p.iter().map(|q| q.x).collect();
        let ys: Vec<UnitVector3> = p.iter().map(|q| q.y).collect();
        (points(&xs), points(&ys))
    };
    let (xtr, ytr) = split(Role::Train);
    let (xte, yte) = split(Role::Test);
    Ok((xtr, ytr, xte, yte))
}

/// Image of `x` under a named map (see `simulate`).
#[pyfunction]
#[pyo3(signature = (name, x, seed = 0))]
fn apply_map(name: &str, x: Vec<Point>, seed: u64) -> PyResult<Vec<Point>> {
    let map = io::resolve_map(name, seed).map_err(to_py)?;
    Ok(units(&x)?.iter().map(|u| (*map.apply(u).as_vector()).into()).collect())
}

#[pyfunction]
fn mse(y: Vec<Point>, y_hat: Vec<Point>) -> PyResult<f64> {
    evaluate::mse(&units(&y)?, &units(&y_hat)?).map_err(to_py)
}

/// Holdout CV over `lambdas × degrees`; returns `(lambda, degree, table)`.
#[pyfunction]
#[pyo3(signature = (x, y, lambdas, degrees, *, seed = 0, step = 0.05, max_iters = 2000, gradient = "fd"))]
#[allow(clippy::too_many_arguments)]
fn cross_validate(
    py: Python<'_>,
    x: Vec<Point>,
    y: Vec<Point>,
    lambdas: Vec<f64>,
    degrees: Vec<usize>,
    seed: u64,
    step: f64,
    max_iters: usize,
    gradient: &str,
) -> PyResult<(f64, usize, Vec<(f64, usize, f64)>)> {
    let data = pairs(&x, &y)?;
    let template = FitConfig {
        step,
        max_iters,
        seed,
        roughness_gradient: self::gradient(gradient)?,
        ..FitConfig::default()
    };
    let plan = CvPlan::holdout(lambdas, degrees, seed);
    let res = py
        .detach(|| evaluate::cross_validate(&data, &plan, &template))
        .map_err(to_py)?;
    let table = res.table.iter().map(|c| (c.lambda, c.degree, c.val_mse)).collect();
    Ok((res.best_lambda, res.best_degree, table))
}

/// `(x, y)` from a CSV in either the paired or the tangent schema.
#[pyfunction]
fn read_dataset(path: PathBuf) -> PyResult<(Vec<Point>, Vec<Point>)> {
    let data = io::read_dataset(&path).map_err(to_py)?;
    let xs: Vec<UnitVector3> = data.iter().map(|p| p.x).collect();
    let ys: Vec<UnitVector3> = data.iter().map(|p| p.y).collect();
    Ok((points(&xs), points(&ys)))
}

#[pyfunction]
fn write_dataset(path: PathBuf, x: Vec<Point>, y: Vec<Point>) -> PyResult<()> {
    io::write_dataset(&path, &pairs(&x, &y)?).map_err(to_py)
}

#[pymodule]
fn spherediffeo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(py_fit_rotation, m)?)?;
    m.add_function(wrap_pyfunction!(py_fit_projective, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(apply_map, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(cross_validate, m)?)?;
    m.add_function(wrap_pyfunction!(read_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    Ok(())
}
