//! Geometry of the unit 2-sphere: points, tangent vectors, the polar chart,
//! and the exponential map with its inverse.
//!
//! Angles are radians throughout. The polar chart uses colatitude
//! `theta ∈ (0, π)` and longitude `phi ∈ (0, 2π]`; longitude is computed
//! with `atan2` and shifted so that `phi = 0` is reported as `2π`.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// `p·z` at or below `-1 + ANTIPODAL_TOL` is treated as antipodal.
pub const ANTIPODAL_TOL: f64 = 1e-9;

/// A point on S² stored as a unit-norm 3-vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVector3(Vector3<f64>);

impl UnitVector3 {
    /// Normalizes `v`. Fails on zero or non-finite input.
    pub fn new(v: Vector3<f64>) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::NotUnit(format!("norm {n}")));
        }
        Ok(Self(v / n))
    }

    pub fn from_xyz(x: f64, y: f64, z: f64) -> Result<Self> {
        Self::new(Vector3::new(x, y, z))
    }

    /// Wraps a vector the caller already knows to be unit norm, renormalizing
    /// to remove accumulated rounding.
    #[inline]
    pub(crate) fn renormalized(v: Vector3<f64>) -> Self {
        Self(v / v.norm())
    }

    /// Wraps the output of a map that already divides by the norm.
    #[inline]
    pub fn from_normalized(v: Vector3<f64>) -> Self {
        Self(v)
    }

    pub fn north_pole() -> Self {
        Self(Vector3::z())
    }

    #[inline]
    pub fn as_vector(&self) -> &Vector3<f64> {
        &self.0
    }

    #[inline]
    pub fn into_vector(self) -> Vector3<f64> {
        self.0
    }

    #[inline]
    pub fn dot(&self, other: &UnitVector3) -> f64 {
        self.0.dot(&other.0)
    }

    /// Great-circle distance in radians.
    pub fn geodesic_distance(&self, other: &UnitVector3) -> f64 {
        // atan2 form stays accurate for nearly equal and nearly antipodal points.
        self.0.cross(&other.0).norm().atan2(self.0.dot(&other.0))
    }
}

impl std::ops::Index<usize> for UnitVector3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// An element of the tangent plane T_p(S²), stored in ambient coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentVector {
    base: UnitVector3,
    vec: Vector3<f64>,
}

impl TangentVector {
    /// Builds a tangent vector, rejecting `vec` with a normal component above 1e-10.
    pub fn new(base: UnitVector3, vec: Vector3<f64>) -> Result<Self> {
        let normal = base.0.dot(&vec);
        if normal.abs() > 1e-10 * (1.0 + vec.norm()) {
            return Err(Error::NotUnit(format!(
                "vector is not tangent at its base (normal component {normal:.3e})"
            )));
        }
        Ok(Self { base, vec })
    }

    /// Orthogonal projection of an arbitrary vector onto T_base.
    pub fn project(base: UnitVector3, vec: Vector3<f64>) -> Self {
        let vec = vec - base.0 * base.0.dot(&vec);
        Self { base, vec }
    }

    pub fn zero(base: UnitVector3) -> Self {
        Self {
            base,
            vec: Vector3::zeros(),
        }
    }

    #[inline]
    pub(crate) fn from_parts(base: UnitVector3, vec: Vector3<f64>) -> Self {
        Self { base, vec }
    }

    #[inline]
    pub fn base(&self) -> &UnitVector3 {
        &self.base
    }

    #[inline]
    pub fn vec(&self) -> &Vector3<f64> {
        &self.vec
    }

    pub fn norm(&self) -> f64 {
        self.vec.norm()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            base: self.base,
            vec: self.vec * s,
        }
    }
}

/// Colatitude/longitude pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarCoord {
    pub theta: f64,
    pub phi: f64,
}

impl PolarCoord {
    pub fn new(theta: f64, phi: f64) -> Self {
        Self { theta, phi }
    }
}

/// `exp_p(v) = cos(|v|) p + sin(|v|) v/|v|` on raw ambient vectors.
#[inline]
pub(crate) fn exp_raw(p: &Vector3<f64>, v: &Vector3<f64>) -> Vector3<f64> {
    let t = v.norm();
    if t == 0.0 {
        return *p;
    }
    let out = p * t.cos() + v * (t.sin() / t);
    out / out.norm()
}

/// Exponential map at `p`.
pub fn exp_map(p: &UnitVector3, v: &TangentVector) -> UnitVector3 {
    debug_assert!((p.0 - v.base.0).norm() < 1e-12, "tangent vector based elsewhere");
    UnitVector3(exp_raw(&p.0, &v.vec))
}

/// Inverse exponential map at `p`; the zero vector when `z == p`.
pub fn inv_exp_map(p: &UnitVector3, z: &UnitVector3) -> Result<TangentVector> {
    let c = p.0.dot(&z.0);
    if c <= -1.0 + ANTIPODAL_TOL {
        return Err(Error::Antipodal { dot: c });
    }
    // Component of z orthogonal to p has norm sin θ; compute θ from both parts.
    let ortho = z.0 - p.0 * c;
    let s = ortho.norm();
    if s == 0.0 {
        return Ok(TangentVector::zero(*p));
    }
    let theta = s.atan2(c);
    Ok(TangentVector::project(*p, ortho * (theta / s)))
}

pub fn polar_to_cart(c: PolarCoord) -> UnitVector3 {
    let (st, ct) = c.theta.sin_cos();
    let (sp, cp) = c.phi.sin_cos();
    UnitVector3::renormalized(Vector3::new(st * cp, st * sp, ct))
}

/// Longitude in `(0, 2π]`.
#[inline]
pub(crate) fn longitude(x: f64, y: f64) -> f64 {
    let phi = y.atan2(x);
    if phi <= 0.0 {
        phi + TAU
    } else {
        phi
    }
}

/// Colatitude in `[0, π]`, equal to `arccos(z)` for unit input.
#[inline]
pub(crate) fn colatitude(v: &Vector3<f64>) -> f64 {
    v.x.hypot(v.y).atan2(v.z)
}

pub fn cart_to_polar(p: &UnitVector3) -> Result<PolarCoord> {
    let v = &p.0;
    if v.x == 0.0 && v.y == 0.0 {
        return Err(Error::Pole);
    }
    Ok(PolarCoord {
        theta: colatitude(v),
        phi: longitude(v.x, v.y),
    })
}

/// Orthonormal frame `(e_theta, e_phi)` of the tangent plane at `c`.
pub fn tangent_frame(c: PolarCoord) -> Result<(TangentVector, TangentVector)> {
    if c.theta <= 0.0 || c.theta >= PI {
        return Err(Error::Pole);
    }
    let base = polar_to_cart(c);
    let (st, ct) = c.theta.sin_cos();
    let (sp, cp) = c.phi.sin_cos();
    let e_theta = Vector3::new(ct * cp, ct * sp, -st);
    let e_phi = Vector3::new(-sp, cp, 0.0);
    Ok((
        TangentVector::project(base, e_theta),
        TangentVector::project(base, e_phi),
    ))
}

/// Counterclockwise quarter turn inside the tangent plane: `base × vec`.
pub fn rotate_tangent_90(v: &TangentVector) -> TangentVector {
    TangentVector {
        base: v.base,
        vec: v.base.0.cross(&v.vec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_point(rng: &mut ChaCha8Rng) -> UnitVector3 {
        loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                return UnitVector3::new(v).unwrap();
            }
        }
    }

    fn north() -> UnitVector3 {
        UnitVector3::north_pole()
    }

    #[test]
    fn exp_map_examples() {
        let p = north();
        assert_eq!(exp_map(&p, &TangentVector::zero(p)), p);

        let v = TangentVector::new(p, Vector3::new(FRAC_PI_2, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(*exp_map(&p, &v).as_vector(), Vector3::x(), epsilon = 1e-15);

        let v = TangentVector::new(p, Vector3::new(PI, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(*exp_map(&p, &v).as_vector(), -Vector3::z(), epsilon = 1e-15);
    }

    #[test]
    fn inv_exp_examples() {
        let p = north();
        assert_eq!(inv_exp_map(&p, &p).unwrap().norm(), 0.0);
        let v = inv_exp_map(&p, &UnitVector3::from_xyz(1.0, 0.0, 0.0).unwrap()).unwrap();
        assert_abs_diff_eq!(*v.vec(), Vector3::new(FRAC_PI_2, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn inv_exp_rejects_antipodes() {
        let p = north();
        let q = UnitVector3::from_xyz(0.0, 0.0, -1.0).unwrap();
        assert!(matches!(inv_exp_map(&p, &q), Err(Error::Antipodal { .. })));
    }

    #[test]
    fn exp_inv_exp_roundtrip_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut done = 0;
        while done < 1000 {
            let p = random_point(&mut rng);
            let z = random_point(&mut rng);
            if p.dot(&z) <= -1.0 + 1e-6 {
                continue;
            }
            let v = inv_exp_map(&p, &z).unwrap();
            assert!(p.as_vector().dot(v.vec()).abs() < 1e-10);
            assert_abs_diff_eq!(v.norm(), p.dot(&z).clamp(-1.0, 1.0).acos(), epsilon = 1e-7);
            let back = exp_map(&p, &v);
            assert!((back.as_vector() - z.as_vector()).norm() < 1e-9);
            assert!((back.as_vector().norm() - 1.0).abs() < 1e-12);
            done += 1;
        }
    }

    #[test]
    fn geodesic_distance_matches_tangent_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let p = random_point(&mut rng);
            let raw = Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let v = TangentVector::project(p, raw);
            if v.norm() >= PI - 1e-3 {
                continue;
            }
            let q = exp_map(&p, &v);
            assert!((p.geodesic_distance(&q) - v.norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn polar_examples() {
        let p = polar_to_cart(PolarCoord::new(FRAC_PI_2, 0.0));
        assert_abs_diff_eq!(*p.as_vector(), Vector3::x(), epsilon = 1e-16);
        let p = polar_to_cart(PolarCoord::new(FRAC_PI_2, FRAC_PI_2));
        assert_abs_diff_eq!(*p.as_vector(), Vector3::y(), epsilon = 1e-16);

        let c = cart_to_polar(&UnitVector3::from_xyz(1.0, 0.0, 0.0).unwrap()).unwrap();
        assert_eq!((c.theta, c.phi), (FRAC_PI_2, TAU));
        let c = cart_to_polar(&UnitVector3::from_xyz(0.0, -1.0, 0.0).unwrap()).unwrap();
        assert_eq!(c.theta, FRAC_PI_2);
        assert_abs_diff_eq!(c.phi, 1.5 * PI, epsilon = 1e-15);

        assert!(matches!(cart_to_polar(&north()), Err(Error::Pole)));
    }

    #[test]
    fn polar_roundtrip_away_from_poles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let c = PolarCoord::new(rng.random_range(0.05..PI - 0.05), rng.random_range(1e-3..TAU));
            let back = cart_to_polar(&polar_to_cart(c)).unwrap();
            assert!((back.theta - c.theta).abs() < 1e-12);
            assert!((back.phi - c.phi).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_closed_form_at_equator() {
        let (et, ep) = tangent_frame(PolarCoord::new(FRAC_PI_2, 0.0)).unwrap();
        assert_abs_diff_eq!(*et.vec(), -Vector3::z(), epsilon = 1e-16);
        assert_abs_diff_eq!(*ep.vec(), Vector3::y(), epsilon = 1e-16);
        assert!(tangent_frame(PolarCoord::new(0.0, 1.0)).is_err());
        assert!(tangent_frame(PolarCoord::new(PI, 1.0)).is_err());
    }

    #[test]
    fn frame_orthonormal_right_handed_and_smooth() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let c = PolarCoord::new(rng.random_range(0.01..PI - 0.01), rng.random_range(0.0..TAU));
            let (et, ep) = tangent_frame(c).unwrap();
            let (a, b) = (et.vec(), ep.vec());
            assert!((a.dot(a) - 1.0).abs() < 1e-12);
            assert!((b.dot(b) - 1.0).abs() < 1e-12);
            assert!(a.dot(b).abs() < 1e-12);
            let n = et.base().as_vector();
            assert!((a.cross(b).dot(n) - 1.0).abs() < 1e-12);

            let h = 1e-5;
            let (et2, ep2) = tangent_frame(PolarCoord::new(c.theta + h, c.phi + h)).unwrap();
            assert!((et2.vec() - a).norm() < 1e-3);
            assert!((ep2.vec() - b).norm() < 1e-3);
        }
    }

    #[test]
    fn rotate_examples() {
        let v = TangentVector::new(north(), Vector3::x()).unwrap();
        let r = rotate_tangent_90(&v);
        assert_eq!(*r.vec(), Vector3::y());
        assert_eq!(*rotate_tangent_90(&r).vec(), -Vector3::x());
    }

    proptest::proptest! {
        #[test]
        fn rotation_preserves_norm_and_is_orthogonal(
            theta in 0.01f64..3.13, phi in 0.0f64..6.2, a in -3.0f64..3.0, b in -3.0f64..3.0
        ) {
            let (et, ep) = tangent_frame(PolarCoord::new(theta, phi)).unwrap();
            let v = TangentVector::project(*et.base(), et.vec() * a + ep.vec() * b);
            let r = rotate_tangent_90(&v);
            proptest::prop_assert!((r.norm() - v.norm()).abs() < 1e-12);
            proptest::prop_assert!(r.vec().dot(v.vec()).abs() < 1e-12);
            proptest::prop_assert!(r.base().as_vector().dot(r.vec()).abs() < 1e-12);
        }

        #[test]
        fn exp_output_is_unit(theta in 0.01f64..3.13, phi in 0.0f64..6.2, a in -9.0f64..9.0, b in -9.0f64..9.0) {
            let (et, ep) = tangent_frame(PolarCoord::new(theta, phi)).unwrap();
            let v = TangentVector::project(*et.base(), et.vec() * a + ep.vec() * b);
            let q = exp_map(et.base(), &v);
            proptest::prop_assert!((q.as_vector().norm() - 1.0).abs() < 1e-12);
        }
    }
}
