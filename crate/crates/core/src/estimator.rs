//! Penalized maximum-likelihood fitting by gradient ascent on the
//! diffeomorphism group.
//!
//! The objective is `E(γ) = f_n(γ) - λ R(γ)` with `f_n(γ) = n⁻¹ Σ yᵢ·γ(xᵢ)`.
//! Each iteration projects the gradient onto the harmonic basis,
//! `d_j = b_j - λ c_j`, and post-composes `γ` with `p ↦ exp_p(δ Σ d_j B_j(p))`.
//! Images of the training predictors and of the roughness grid are carried
//! along between iterations, so each step costs one basis evaluation at
//! those points.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::diffeo::{apply_step, nearest_rotation, DiffeoModel, SphereMap, Step};
use crate::error::{Error, Result};
use crate::evaluate::Pair;
use crate::harmonics::{eval_basis_matrix, BasisMatrix, BasisSpec, HarmonicBasis};
use crate::roughness::{
    map_points, report_from_images, roughness_with_gradient, GridGeometry, RoughnessReport,
    DEFAULT_POLE_OFFSET, FIT_RESOLUTION,
};
use crate::sphere::{exp_raw, UnitVector3};

/// Consecutive small objective changes required to declare convergence.
pub const CONVERGENCE_PATIENCE: usize = 5;
/// Halvings tried before an iteration gives up on finding an ascent step.
pub const MAX_HALVINGS: usize = 20;
/// Upper bound on `δ |d|` for a single step, in radians.
pub const MAX_STEP_ANGLE: f64 = std::f64::consts::FRAC_PI_4;

/// How the roughness directional derivatives `c_j` are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RoughnessGradient {
    /// `c_j = (R(Ψ_{εB_j}∘γ) - R(γ)) / ε`, one grid deformation per field.
    #[default]
    ForwardDifference,
    /// Exact derivative of the discretized `R`, from per-node sensitivities.
    /// Same target as the forward difference without the `O(ε)` bias, at the
    /// cost of a single grid pass.
    Adjoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub lambda: f64,
    pub degree: usize,
    /// Step size `δ`.
    pub step: f64,
    /// Finite-difference increment `ε` for the roughness gradient.
    pub eps: f64,
    pub grid: usize,
    pub pole_offset: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub roughness_gradient: RoughnessGradient,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            degree: 3,
            step: 0.05,
            eps: 1e-4,
            grid: FIT_RESOLUTION,
            pole_offset: DEFAULT_POLE_OFFSET,
            max_iters: 2000,
            tol: 1e-6,
            seed: 0,
            roughness_gradient: RoughnessGradient::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<BasisSpec> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a finite non-negative number, got {}", self.lambda));
        }
        for (name, v) in [("step", self.step), ("eps", self.eps), ("tol", self.tol)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        GridGeometry::new(self.grid, self.pole_offset)?;
        BasisSpec::new(self.degree)
    }
}

/// Directional derivatives along each basis field.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCoefficients {
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

impl GradientCoefficients {
    pub fn new(b: Vec<f64>, c: Vec<f64>, lambda: f64) -> Self {
        let d = b.iter().zip(&c).map(|(b, c)| b - lambda * c).collect();
        Self { b, c, d }
    }

    pub fn norm(&self) -> f64 {
        self.d.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitRecord {
    pub iter: usize,
    /// `E` after the iteration.
    pub objective: f64,
    pub likelihood: f64,
    pub roughness: f64,
    /// `|d|` computed at the start of the iteration.
    pub grad_norm: f64,
    /// Step size used, or 0 when no ascent step was found.
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIters,
    /// No step size down to `δ / 2^20` increased the objective.
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    /// State before the first iteration.
    pub initial: FitRecord,
    pub records: Vec<FitRecord>,
    pub termination: Termination,
}

impl FitTrace {
    pub fn final_record(&self) -> &FitRecord {
        self.records.last().unwrap_or(&self.initial)
    }

    pub fn accepted_steps(&self) -> usize {
        self.records.iter().filter(|r| r.step > 0.0).count()
    }
}

/// `f_n = n⁻¹ Σ yᵢ·zᵢ` in index order; 0 for no data.
fn mean_alignment(pairs: &[Pair], images: &[Vector3<f64>]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let mut s = 0.0;
    for (pair, z) in pairs.iter().zip(images) {
        s += pair.y.as_vector().dot(z);
    }
    s / pairs.len() as f64
}

pub fn log_likelihood_term<G: SphereMap + ?Sized>(gamma: &G, data: &[Pair]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let images: Vec<Vector3<f64>> = data.par_iter().map(|p| gamma.map_vector(p.x.as_vector())).collect();
    Ok(mean_alignment(data, &images))
}

/// `b_j = n⁻¹ Σ yᵢ·B_j(zᵢ)` with fields already evaluated at the images.
fn likelihood_coeffs_at(pairs: &[Pair], fields: &BasisMatrix) -> Vec<f64> {
    let mut b = vec![0.0; fields.n_fields()];
    if pairs.is_empty() {
        return b;
    }
    for (i, pair) in pairs.iter().enumerate() {
        let y = pair.y.as_vector();
        for (bj, f) in b.iter_mut().zip(fields.at_point(i)) {
            *bj += y.dot(f);
        }
    }
    let n = pairs.len() as f64;
    b.iter_mut().for_each(|v| *v /= n);
    b
}

/// Analytic likelihood gradient; the zero vector when `data` is empty.
pub fn likelihood_gradient_coeffs<G: SphereMap + ?Sized>(
    gamma: &G,
    data: &[Pair],
    spec: BasisSpec,
) -> Vec<f64> {
    let basis = HarmonicBasis::new(spec);
    let images: Vec<Vector3<f64>> = data.par_iter().map(|p| gamma.map_vector(p.x.as_vector())).collect();
    likelihood_coeffs_at(data, &eval_basis_matrix(&basis, &images))
}

fn roughness_coeffs_at(
    geo: &GridGeometry,
    images: &[Vector3<f64>],
    fields: &BasisMatrix,
    method: RoughnessGradient,
    eps: f64,
) -> Result<(RoughnessReport, Vec<f64>)> {
    let n_fields = fields.n_fields();
    match method {
        RoughnessGradient::ForwardDifference => {
            let base = report_from_images(geo, images);
            if !base.r.is_finite() {
                return Err(Error::SingularBase {
                    singular_cells: base.singular_cell_count,
                });
            }
            let c = (0..n_fields)
                .into_par_iter()
                .map(|j| {
                    let moved: Vec<Vector3<f64>> = images
                        .iter()
                        .enumerate()
                        .map(|(k, p)| exp_raw(p, &(fields.get(j, k) * eps)))
                        .collect();
                    (report_from_images(geo, &moved).r - base.r) / eps
                })
                .collect();
            Ok((base, c))
        }
        RoughnessGradient::Adjoint => {
            let (base, grad) = roughness_with_gradient(geo, images);
            let grad = grad.ok_or(Error::SingularBase {
                singular_cells: base.singular_cell_count,
            })?;
            // Fixed-size chunks keep the summation order independent of the
            // thread count.
            let chunk = geo.resolution();
            let partial: Vec<Vec<f64>> = grad
                .par_chunks(chunk)
                .enumerate()
                .map(|(ci, g)| {
                    let mut acc = vec![0.0; n_fields];
                    for (off, gk) in g.iter().enumerate() {
                        let k = ci * chunk + off;
                        for (a, f) in acc.iter_mut().zip(fields.at_point(k)) {
                            *a += gk.dot(f);
                        }
                    }
                    acc
                })
                .collect();
            let mut c = vec![0.0; n_fields];
            for p in partial {
                c.iter_mut().zip(p).for_each(|(a, b)| *a += b);
            }
            Ok((base, c))
        }
    }
}

/// Roughness gradient of `gamma` on an `m`-grid.
pub fn roughness_gradient_coeffs<G: SphereMap + ?Sized>(
    gamma: &G,
    spec: BasisSpec,
    method: RoughnessGradient,
    eps: f64,
    m: usize,
    pole_offset: f64,
) -> Result<Vec<f64>> {
    let geo = GridGeometry::new(m, pole_offset)?;
    let images = map_points(gamma, geo.sources());
    let fields = eval_basis_matrix(&HarmonicBasis::new(spec), &images);
    Ok(roughness_coeffs_at(&geo, &images, &fields, method, eps)?.1)
}

/// `E = f_n - λ R`; `f_n` is 0 for empty data.
pub fn objective<G: SphereMap + ?Sized>(
    gamma: &G,
    data: &[Pair],
    lambda: f64,
    m: usize,
    pole_offset: f64,
) -> Result<f64> {
    let f = if data.is_empty() { 0.0 } else { log_likelihood_term(gamma, data)? };
    if lambda == 0.0 {
        return Ok(f);
    }
    let rep = crate::roughness::roughness(gamma, m, pole_offset)?;
    if !rep.r.is_finite() {
        return Err(Error::SingularBase {
            singular_cells: rep.singular_cell_count,
        });
    }
    Ok(f - lambda * rep.r)
}

/// Rotation maximizing `Σ yᵢ·R xᵢ`, from the SVD of `D = Σ yᵢ xᵢᵀ`.
pub fn procrustes_init(data: &[Pair]) -> Result<Matrix3<f64>> {
    if data.len() < 2 {
        return Err(Error::DegenerateData(format!(
            "Procrustes needs at least 2 pairs, got {}",
            data.len()
        )));
    }
    let mut d = Matrix3::zeros();
    for p in data {
        d += p.y.as_vector() * p.x.as_vector().transpose();
    }
    let sv = d.singular_values();
    let (max, mid) = {
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        (s[0], s[1])
    };
    if !(max > 0.0) || mid <= 1e-12 * max {
        return Err(Error::DegenerateData("cross-covariance has rank below 2".into()));
    }
    Ok(nearest_rotation(&d))
}

/// A base map followed by a sequence of harmonic steps.
pub struct Deformed<'a, G: ?Sized> {
    pub base: &'a G,
    pub basis: &'a HarmonicBasis,
    pub steps: &'a [Step],
}

impl<G: SphereMap + ?Sized> SphereMap for Deformed<'_, G> {
    fn map_vector(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let mut z = self.base.map_vector(p);
        let mut buf = vec![Vector3::zeros(); self.basis.len()];
        for step in self.steps {
            self.basis.eval_into(&z, &mut buf);
            z = apply_step(&z, &buf, step);
        }
        z
    }
}

/// Gradient ascent from arbitrary starting images.
struct Engine<'a> {
    basis: &'a HarmonicBasis,
    geo: GridGeometry,
    pairs: &'a [Pair],
    data_images: Vec<Vector3<f64>>,
    grid_images: Vec<Vector3<f64>>,
    config: &'a FitConfig,
}

struct Evaluation {
    likelihood: f64,
    roughness: f64,
    objective: f64,
}

impl Engine<'_> {
    fn evaluate(&self, data_images: &[Vector3<f64>], grid_images: &[Vector3<f64>]) -> Evaluation {
        let likelihood = mean_alignment(self.pairs, data_images);
        let roughness = report_from_images(&self.geo, grid_images).r;
        let objective = if self.config.lambda == 0.0 {
            likelihood
        } else {
            likelihood - self.config.lambda * roughness
        };
        Evaluation {
            likelihood,
            roughness,
            objective,
        }
    }

    fn gradient(&self, data_fields: &BasisMatrix, grid_fields: &BasisMatrix) -> Result<(RoughnessReport, GradientCoefficients)> {
        let b = likelihood_coeffs_at(self.pairs, data_fields);
        let cfg = self.config;
        let (rep, c) = if cfg.lambda == 0.0 {
            (report_from_images(&self.geo, &self.grid_images), vec![0.0; b.len()])
        } else {
            roughness_coeffs_at(&self.geo, &self.grid_images, grid_fields, cfg.roughness_gradient, cfg.eps)?
        };
        Ok((rep, GradientCoefficients::new(b, c, cfg.lambda)))
    }

    fn run(&mut self, mut accept: impl FnMut(Step) -> Result<()>) -> Result<FitTrace> {
        let cfg = self.config;
        let start = self.evaluate(&self.data_images, &self.grid_images);
        if cfg.lambda > 0.0 && !start.roughness.is_finite() {
            let rep = report_from_images(&self.geo, &self.grid_images);
            return Err(Error::SingularBase {
                singular_cells: rep.singular_cell_count,
            });
        }
        let initial = FitRecord {
            iter: 0,
            objective: start.objective,
            likelihood: start.likelihood,
            roughness: start.roughness,
            grad_norm: f64::NAN,
            step: 0.0,
        };
        let mut current = start;
        let mut records = Vec::new();
        let mut calm = 0;
        let mut termination = Termination::MaxIters;
        for iter in 1..=cfg.max_iters {
            let data_fields = eval_basis_matrix(self.basis, &self.data_images);
            let grid_fields = eval_basis_matrix(self.basis, &self.grid_images);
            let (_, grad) = self.gradient(&data_fields, &grid_fields)?;
            let grad_norm = grad.norm();
            let mut delta = cfg.step;
            if delta * grad_norm > MAX_STEP_ANGLE {
                delta = MAX_STEP_ANGLE / grad_norm;
            }
            let mut taken = None;
            if grad_norm > 0.0 {
                for _ in 0..=MAX_HALVINGS {
                    let step = Step {
                        delta,
                        coeffs: grad.d.clone(),
                    };
                    let data_next: Vec<Vector3<f64>> = self
                        .data_images
                        .par_iter()
                        .enumerate()
                        .map(|(i, z)| apply_step(z, data_fields.at_point(i), &step))
                        .collect();
                    let grid_next: Vec<Vector3<f64>> = self
                        .grid_images
                        .par_iter()
                        .enumerate()
                        .map(|(k, z)| apply_step(z, grid_fields.at_point(k), &step))
                        .collect();
                    let eval = self.evaluate(&data_next, &grid_next);
                    if eval.objective >= current.objective {
                        taken = Some((step, data_next, grid_next, eval));
                        break;
                    }
                    delta *= 0.5;
                }
            }
            let Some((step, data_next, grid_next, eval)) = taken else {
                records.push(FitRecord {
                    iter,
                    objective: current.objective,
                    likelihood: current.likelihood,
                    roughness: current.roughness,
                    grad_norm,
                    step: 0.0,
                });
                termination = Termination::Stalled;
                break;
            };
            let change = (eval.objective - current.objective).abs();
            records.push(FitRecord {
                iter,
                objective: eval.objective,
                likelihood: eval.likelihood,
                roughness: eval.roughness,
                grad_norm,
                step: step.delta,
            });
            accept(step)?;
            self.data_images = data_next;
            self.grid_images = grid_next;
            current = eval;
            calm = if change < cfg.tol { calm + 1 } else { 0 };
            if calm >= CONVERGENCE_PATIENCE {
                termination = Termination::Converged;
                break;
            }
        }
        log::debug!(
            "fit finished after {} iterations ({termination:?}), E = {}",
            records.len(),
            current.objective
        );
        Ok(FitTrace {
            initial,
            records,
            termination,
        })
    }
}

/// Fits starting from an arbitrary map; returns the accepted steps, to be
/// applied after `init`.
pub fn fit_from_map<G: SphereMap + ?Sized>(
    init: &G,
    data: &[Pair],
    config: &FitConfig,
) -> Result<(Vec<Step>, FitTrace)> {
    let spec = config.validate()?;
    let basis = HarmonicBasis::new(spec);
    let geo = GridGeometry::new(config.grid, config.pole_offset)?;
    let grid_images = map_points(init, geo.sources());
    let data_images = data.par_iter().map(|p| init.map_vector(p.x.as_vector())).collect();
    let mut engine = Engine {
        basis: &basis,
        geo,
        pairs: data,
        data_images,
        grid_images,
        config,
    };
    let mut steps = Vec::new();
    let trace = engine.run(|s| {
        steps.push(s);
        Ok(())
    })?;
    Ok((steps, trace))
}

/// Procrustes initialization followed by penalized gradient ascent.
pub fn fit(data: &[Pair], config: &FitConfig) -> Result<(DiffeoModel, FitTrace)> {
    let spec = config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let rotation = procrustes_init(data)?;
    let model = DiffeoModel::new(rotation, spec)?;
    fit_model(model, data, config)
}

/// Continues fitting from an existing model; its basis degree must match.
pub fn fit_model(mut model: DiffeoModel, data: &[Pair], config: &FitConfig) -> Result<(DiffeoModel, FitTrace)> {
    let spec = config.validate()?;
    if model.spec() != spec {
        return Err(Error::InvalidConfig(format!(
            "model has degree {}, config asks for {}",
            model.spec().max_degree(),
            spec.max_degree()
        )));
    }
    let geo = GridGeometry::new(config.grid, config.pole_offset)?;
    let grid_images = map_points(&model, geo.sources());
    let data_images = data.par_iter().map(|p| model.map_vector(p.x.as_vector())).collect();
    let basis = model.basis().clone();
    let mut engine = Engine {
        basis: &basis,
        geo,
        pairs: data,
        data_images,
        grid_images,
        config,
    };
    let trace = engine.run(|s| model.push_step(s))?;
    Ok((model, trace))
}

pub fn predict<G: SphereMap + ?Sized>(model: &G, xs: &[UnitVector3]) -> Vec<UnitVector3> {
    xs.par_iter().map(|x| model.apply(x)).collect()
}
