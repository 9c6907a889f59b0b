//! Comparison models: rigid rotation and projective-linear `x ↦ Px/|Px|`.

use nalgebra::{Matrix3, Vector3};

use crate::diffeo::{check_rotation, SphereMap};
use crate::error::{Error, Result};
use crate::estimator::procrustes_init;
use crate::evaluate::Pair;
use crate::sphere::UnitVector3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationModel {
    pub rotation: Matrix3<f64>,
}

impl RotationModel {
    pub fn new(rotation: Matrix3<f64>) -> Result<Self> {
        check_rotation(&rotation)?;
        Ok(Self { rotation })
    }
}

impl SphereMap for RotationModel {
    fn map_vector(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let q = self.rotation * p;
        q / q.norm()
    }
}

/// `x ↦ Px/|Px|` with `det P = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectiveModel {
    pub matrix: Matrix3<f64>,
}

impl ProjectiveModel {
    /// Rescales `p` to unit determinant.
    pub fn new(p: Matrix3<f64>) -> Result<Self> {
        let det = p.determinant();
        if !(det.is_finite() && det != 0.0) {
            return Err(Error::InvalidConfig("projective matrix is singular".into()));
        }
        Ok(Self {
            matrix: p / det.cbrt(),
        })
    }
}

impl SphereMap for ProjectiveModel {
    fn map_vector(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let q = self.matrix * p;
        q / q.norm()
    }
}

pub fn fit_rotation(data: &[Pair]) -> Result<RotationModel> {
    RotationModel::new(procrustes_init(data)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectiveFitConfig {
    /// Initial step along the traceless direction.
    pub step: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ProjectiveFitConfig {
    fn default() -> Self {
        Self {
            step: 0.01,
            max_iters: 5000,
            tol: 1e-12,
        }
    }
}

fn projective_objective(p: &Matrix3<f64>, data: &[Pair]) -> f64 {
    let mut s = 0.0;
    for d in data {
        let q = p * d.x.as_vector();
        s += d.y.as_vector().dot(&q) / q.norm();
    }
    s / data.len() as f64
}

/// Euclidean gradient of the mean alignment with respect to `P`.
fn projective_gradient(p: &Matrix3<f64>, data: &[Pair]) -> Matrix3<f64> {
    let mut g = Matrix3::zeros();
    for d in data {
        let q = p * d.x.as_vector();
        let n = q.norm();
        let u = q / n;
        let y = d.y.as_vector();
        let dq = (y - u * u.dot(y)) / n;
        g += dq * d.x.as_vector().transpose();
    }
    g / data.len() as f64
}

/// Maximizes `n⁻¹ Σ yᵢ·Pxᵢ/|Pxᵢ|` over `det P = 1` from the Procrustes
/// rotation. Steps are `P ← P(I + ηX)` with `X` the traceless part of `PᵀG`,
/// followed by determinant renormalization; `η` grows by 1.5 on success and
/// halves on failure.
pub fn fit_projective(data: &[Pair], config: &ProjectiveFitConfig) -> Result<ProjectiveModel> {
    let mut p = procrustes_init(data)?;
    let mut f = projective_objective(&p, data);
    let mut eta = config.step;
    let mut calm = 0;
    for _ in 0..config.max_iters {
        let g = projective_gradient(&p, data);
        let m = p.transpose() * g;
        let x = m - Matrix3::identity() * (m.trace() / 3.0);
        if x.norm() == 0.0 {
            break;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let cand = p * (Matrix3::identity() + x * eta);
            let det = cand.determinant();
            if det > 0.0 {
                let cand = cand / det.cbrt();
                let fc = projective_objective(&cand, data);
                if fc >= f {
                    calm = if fc - f < config.tol { calm + 1 } else { 0 };
                    p = cand;
                    f = fc;
                    eta *= 1.5;
                    accepted = true;
                    break;
                }
            }
            eta *= 0.5;
        }
        if !accepted || calm >= 5 {
            break;
        }
    }
    ProjectiveModel::new(p)
}

pub fn predict_baseline<G: SphereMap + ?Sized>(model: &G, xs: &[UnitVector3]) -> Vec<UnitVector3> {
    xs.iter().map(|x| model.apply(x)).collect()
}
