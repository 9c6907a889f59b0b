//! Diffeomorphisms of S².
//!
//! [`DiffeoModel`] is the fitted representation: a rigid rotation followed by
//! a sequence of small steps `p ↦ exp_p(δ Σ_j c_j B_j(p))`. [`ParametricDiffeo`]
//! collects closed-form families (rotations, projective-linear maps, Möbius
//! maps, twists and harmonic increments) used to simulate ground truth.
//!
//! Composition lists follow function-composition order: `[g1, g2, g3]` is
//! `g1 ∘ g2 ∘ g3`, so `g3` is applied first.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::harmonics::{combine_fields, BasisSpec, HarmonicBasis};
use crate::sphere::{exp_raw, UnitVector3};

/// Tolerance for `RᵀR = I` and `det R = 1`.
pub const ORTHO_TOL: f64 = 1e-10;
/// Tolerance for `det P = 1` of projective-linear maps.
pub const SL_TOL: f64 = 1e-8;
/// Harmonic increments must satisfy `|c| < INCREMENT_NORM_BOUND`.
pub const INCREMENT_NORM_BOUND: f64 = 0.5;

/// Anything that maps the sphere to itself.
pub trait SphereMap: Sync {
    /// Image of a unit vector; implementations divide by the norm last.
    fn map_vector(&self, p: &Vector3<f64>) -> Vector3<f64>;

    fn apply(&self, p: &UnitVector3) -> UnitVector3 {
        UnitVector3::from_normalized(self.map_vector(p.as_vector()))
    }
}

impl<T: SphereMap + ?Sized> SphereMap for &T {
    fn map_vector(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (**self).map_vector(p)
    }
}

impl<T: SphereMap + ?Sized> SphereMap for Box<T> {
    fn map_vector(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (**self).map_vector(p)
    }
}

/// The identity map.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl SphereMap for Identity {
    fn map_vector(&self, p: &Vector3<f64>) -> Vector3<f64> {
        *p
    }
}

/// `p ↦ Ap/|Ap|` for any invertible matrix; orthogonal `A` (including
/// reflections) gives an isometry.
#[derive(Debug, Clone, Copy)]
pub struct LinearMap(pub Matrix3<f64>);

impl SphereMap for LinearMap {
    fn map_vector(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let q = self.0 * p;
        q / q.norm()
    }
}

/// `outer ∘ inner`.
pub struct Composed<A, B> {
    pub outer: A,
    pub inner: B,
}

impl<A: SphereMap, B: SphereMap> SphereMap for Composed<A, B> {
    fn map_vector(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.outer.map_vector(&self.inner.map_vector(p))
    }
}

pub fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if ortho > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
        return Err(Error::InvalidConfig(format!(
            "matrix is not a rotation (|RᵀR - I| = {ortho:.2e}, det = {det})"
        )));
    }
    Ok(())
}

/// Nearest rotation in Frobenius norm (polar factor with det fixed to +1).
pub fn nearest_rotation(a: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = a.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        let k = svd.singular_values.imin();
        d[(k, k)] = -1.0;
    }
    u * d * v_t
}

/// One gradient-ascent increment.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub delta: f64,
    pub coeffs: Vec<f64>,
}

impl Step {
    pub fn coeff_norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

/// Applies one step given the basis fields already evaluated at `z`.
#[inline]
pub(crate) fn apply_step(z: &Vector3<f64>, fields: &[Vector3<f64>], step: &Step) -> Vector3<f64> {
    let v = combine_fields(fields, &step.coeffs) * step.delta;
    exp_raw(z, &v)
}

/// Fitted map `γ = Ψ_K ∘ … ∘ Ψ_1 ∘ R`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffeoModel {
    init_rotation: Matrix3<f64>,
    basis: HarmonicBasis,
    steps: Vec<Step>,
}

impl DiffeoModel {
    pub fn new(init_rotation: Matrix3<f64>, spec: BasisSpec) -> Result<Self> {
        check_rotation(&init_rotation)?;
        Ok(Self {
            init_rotation,
            basis: HarmonicBasis::new(spec),
            steps: Vec::new(),
        })
    }

    pub fn identity(spec: BasisSpec) -> Self {
        Self::new(Matrix3::identity(), spec).expect("identity is a rotation")
    }

    pub fn with_steps(init_rotation: Matrix3<f64>, spec: BasisSpec, steps: Vec<Step>) -> Result<Self> {
        let mut m = Self::new(init_rotation, spec)?;
        for s in steps {
            m.push_step(s)?;
        }
        Ok(m)
    }

    pub fn push_step(&mut self, step: Step) -> Result<()> {
        if step.coeffs.len() != self.basis.len() {
            return Err(Error::Schema(format!(
                "step has {} coefficients, basis of degree {} needs {}",
                step.coeffs.len(),
                self.basis.spec().max_degree(),
                self.basis.len()
            )));
        }
        if !(step.delta > 0.0) || !(step.delta * step.coeff_norm() < FRAC_PI_2) {
            return Err(Error::InvalidConfig(format!(
                "step violates 0 < δ and δ|c| < π/2 (δ = {}, |c| = {})",
                step.delta,
                step.coeff_norm()
            )));
        }
        self.steps.push(step);
        Ok(())
    }

    pub fn init_rotation(&self) -> &Matrix3<f64> {
        &self.init_rotation
    }

    pub fn basis(&self) -> &HarmonicBasis {
        &self.basis
    }

    pub fn spec(&self) -> BasisSpec {
        self.basis.spec()
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub(crate) fn rotate(&self, x: &Vector3<f64>) -> Vector3<f64> {
        if self.init_rotation == Matrix3::identity() {
            return *x;
        }
        let z = self.init_rotation * x;
        z / z.norm()
    }
}

impl SphereMap for DiffeoModel {
    fn map_vector(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let mut z = self.rotate(p);
        if self.steps.is_empty() {
            return z;
        }
        let mut buf = vec![Vector3::zeros(); self.basis.len()];
        for step in &self.steps {
            self.basis.eval_into(&z, &mut buf);
            z = apply_step(&z, &buf, step);
        }
        z
    }
}

pub fn apply_model(m: &DiffeoModel, x: &UnitVector3) -> UnitVector3 {
    m.apply(x)
}

/// 2×2 complex matrix `[[a, b], [c, d]]` of a Möbius transformation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MobiusMatrix {
    pub a: Complex64,
    pub b: Complex64,
    pub c: Complex64,
    pub d: Complex64,
}

impl MobiusMatrix {
    pub fn new(a: Complex64, b: Complex64, c: Complex64, d: Complex64) -> Self {
        Self { a, b, c, d }
    }

    pub fn identity() -> Self {
        let one = Complex64::new(1.0, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        Self::new(one, zero, zero, one)
    }

    pub fn det(&self) -> Complex64 {
        self.a * self.d - self.b * self.c
    }
}

/// Closed-form diffeomorphism families.
#[derive(Debug, Clone, PartialEq)]
pub enum ParametricDiffeo {
    Rotation(Matrix3<f64>),
    ProjectiveLinear(Matrix3<f64>),
    Conformal(MobiusMatrix),
    Twist(f64),
    HarmonicIncrement { basis: HarmonicBasis, coeffs: Vec<f64> },
    Composite(Vec<ParametricDiffeo>),
}

impl ParametricDiffeo {
    pub fn rotation(r: Matrix3<f64>) -> Result<Self> {
        check_rotation(&r)?;
        Ok(Self::Rotation(r))
    }

    /// Rotation closest to an approximately orthogonal matrix.
    pub fn rotation_from_approx(a: Matrix3<f64>) -> Self {
        Self::Rotation(nearest_rotation(&a))
    }

    /// Projective-linear map; `p` is rescaled to unit determinant.
    pub fn projective(p: Matrix3<f64>) -> Result<Self> {
        let det = p.determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::InvalidConfig("projective matrix is singular".into()));
        }
        Ok(Self::ProjectiveLinear(p / det.cbrt()))
    }

    pub fn conformal(m: MobiusMatrix) -> Result<Self> {
        if m.det().norm() == 0.0 {
            return Err(Error::InvalidConfig("Möbius matrix is singular".into()));
        }
        Ok(Self::Conformal(m))
    }

    pub fn twist(r: f64) -> Self {
        Self::Twist(r)
    }

    pub fn harmonic_increment(spec: BasisSpec, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != spec.count() {
            return Err(Error::InvalidConfig(format!(
                "increment needs {} coefficients, got {}",
                spec.count(),
                coeffs.len()
            )));
        }
        let norm = coeffs.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm >= INCREMENT_NORM_BOUND {
            return Err(Error::InvalidConfig(format!(
                "increment coefficient norm {norm} is not below {INCREMENT_NORM_BOUND}"
            )));
        }
        Ok(Self::HarmonicIncrement {
            basis: HarmonicBasis::new(spec),
            coeffs,
        })
    }

    /// Checks the invariants of the variant (recursively for composites).
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Rotation(r) => check_rotation(r),
            Self::ProjectiveLinear(p) => {
                let det = p.determinant();
                if (det - 1.0).abs() > SL_TOL {
                    return Err(Error::InvalidConfig(format!("projective det {det} ≠ 1")));
                }
                Ok(())
            }
            Self::Conformal(m) => {
                if m.det().norm() == 0.0 {
                    return Err(Error::InvalidConfig("Möbius matrix is singular".into()));
                }
                Ok(())
            }
            Self::Twist(r) => {
                if r.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidConfig("twist rate must be finite".into()))
                }
            }
            Self::HarmonicIncrement { basis, coeffs } => {
                Self::harmonic_increment(basis.spec(), coeffs.clone()).map(|_| ())
            }
            Self::Composite(parts) => {
                if parts.is_empty() {
                    return Err(Error::InvalidConfig("empty composite".into()));
                }
                parts.iter().try_for_each(|p| p.validate())
            }
        }
    }
}

/// `list[0] ∘ list[1] ∘ …`; the last element is applied first.
pub fn compose(list: Vec<ParametricDiffeo>) -> Result<ParametricDiffeo> {
    if list.is_empty() {
        return Err(Error::InvalidConfig("cannot compose an empty list".into()));
    }
    Ok(ParametricDiffeo::Composite(list))
}

fn apply_conformal(m: &MobiusMatrix, p: &Vector3<f64>) -> Vector3<f64> {
    let z = Complex64::new(p.x, p.y);
    let t = p.z;
    // 1 - t without cancellation near the north pole.
    let w = if t > 0.0 { z.norm_sqr() / (1.0 + t) } else { 1.0 - t };
    let num_a = m.a * z + m.b * w;
    let num_c = m.c * z + m.d * w;
    let (num_a, num_c) = if num_a.norm_sqr() + num_c.norm_sqr() == 0.0 {
        // z = 0, t = 1: the generic formula is 0/0; use the north-pole branch.
        (m.a, m.c)
    } else {
        (num_a, num_c)
    };
    let na = num_a.norm_sqr();
    let nc = num_c.norm_sqr();
    let den = na + nc;
    let planar = num_c.conj() * num_a * (2.0 / den);
    let out = Vector3::new(planar.re, planar.im, (na - nc) / den);
    out / out.norm()
}

fn apply_twist(r: f64, p: &Vector3<f64>) -> Vector3<f64> {
    let (s, c) = (r * p.z).sin_cos();
    let out = Vector3::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z);
    out / out.norm()
}

impl SphereMap for ParametricDiffeo {
    fn map_vector(&self, p: &Vector3<f64>) -> Vector3<f64> {
        match self {
            Self::Rotation(r) => {
                let q = r * p;
                q / q.norm()
            }
            Self::ProjectiveLinear(m) => {
                let q = m * p;
                q / q.norm()
            }
            Self::Conformal(m) => apply_conformal(m, p),
            Self::Twist(r) => apply_twist(*r, p),
            Self::HarmonicIncrement { basis, coeffs } => exp_raw(p, &basis.combine(p, coeffs)),
            Self::Composite(parts) => parts
                .iter()
                .rev()
                .fold(*p, |acc, part| part.map_vector(&acc)),
        }
    }
}

pub fn apply_parametric(d: &ParametricDiffeo, x: &UnitVector3) -> UnitVector3 {
    d.apply(x)
}

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Starting map of the roughness-decay experiment without data:
/// rotation ∘ projective ∘ Möbius ∘ twist(0.1088). The published rotation
/// has four decimals and is projected onto SO(3).
pub fn no_data_initial_map() -> ParametricDiffeo {
    let a1 = Matrix3::new(
        0.9564, 0.2134, 0.1994, //
        -0.2096, 0.9770, -0.0403, //
        -0.2034, -0.0032, 0.9791,
    );
    let a2 = Matrix3::new(
        1.1874, 0.4557, 0.1407, //
        0.2148, 1.0150, 0.2162, //
        1.3649, -0.2516, 0.9063,
    );
    let m = MobiusMatrix::new(
        c(0.8423, 0.1561),
        c(-0.0207, 0.0537),
        c(-0.1746, 0.0382),
        c(1.1054, -0.0512),
    );
    ParametricDiffeo::Composite(vec![
        ParametricDiffeo::rotation_from_approx(a1),
        ParametricDiffeo::projective(a2).expect("published matrix is invertible"),
        ParametricDiffeo::Conformal(m),
        ParametricDiffeo::Twist(0.1088),
    ])
}

/// Möbius matrix of the simulated ground truth.
pub fn simulation_mobius() -> MobiusMatrix {
    MobiusMatrix::new(
        c(0.8979, -0.23681),
        c(-0.1256, 0.2807),
        c(-0.3810, 0.3379),
        c(0.6171, -0.1121),
    )
}

/// Shape of a randomly generated ground-truth map.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeConfig {
    pub mobius: Option<MobiusMatrix>,
    pub twist: Option<f64>,
    pub n_increments: usize,
    pub increment_degree: usize,
    /// Standard deviation of each increment coefficient.
    pub coeff_scale: f64,
}

impl Default for CompositeConfig {
    /// Möbius ∘ twist(0.1877) ∘ five degree-2 increments.
    fn default() -> Self {
        Self {
            mobius: Some(simulation_mobius()),
            twist: Some(0.1877),
            n_increments: 5,
            increment_degree: 2,
            coeff_scale: 0.05,
        }
    }
}

/// Seeded composite `Möbius ∘ twist ∘ inc_1 ∘ … ∘ inc_J`. Coefficients are
/// Gaussian with standard deviation `coeff_scale`, shrunk if needed so each
/// increment stays below the norm bound.
pub fn random_composite(seed: u64, config: &CompositeConfig) -> Result<ParametricDiffeo> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = Vec::new();
    if let Some(m) = config.mobius {
        parts.push(ParametricDiffeo::conformal(m)?);
    }
    if let Some(r) = config.twist {
        parts.push(ParametricDiffeo::Twist(r));
    }
    if config.coeff_scale > 0.0 && config.n_increments > 0 {
        let spec = BasisSpec::new(config.increment_degree)?;
        for _ in 0..config.n_increments {
            let mut coeffs: Vec<f64> = (0..spec.count())
                .map(|_| config.coeff_scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = coeffs.iter().map(|c| c * c).sum::<f64>().sqrt();
            let cap = 0.9 * INCREMENT_NORM_BOUND;
            if norm > cap {
                coeffs.iter_mut().for_each(|c| *c *= cap / norm);
            }
            parts.push(ParametricDiffeo::harmonic_increment(spec, coeffs)?);
        }
    }
    if parts.is_empty() {
        return Ok(ParametricDiffeo::Rotation(Matrix3::identity()));
    }
    compose(parts)
}
