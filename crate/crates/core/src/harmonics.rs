//! Tangent vector fields on S² built from real spherical harmonics.
//!
//! For every real harmonic `Y` of degree `1..=l` the basis contains the
//! surface gradient `∇Y` and its quarter-turned copy `p × ∇Y`. With the
//! orthonormal (L²(S²)) real harmonics, `∫|∇Y|² = n(n+1)`, so each field is
//! divided by `sqrt(n(n+1))` and the resulting set is orthonormal in L² of
//! tangent fields. This gives `L = 2(l+1)² - 2` fields.
//!
//! Canonical ordering (ordering version 1): all gradient fields first, then
//! all rotated fields in the same order. Within a block, fields are sorted by
//! degree, then order `m = 0..=degree`, real part before imaginary part
//! (the imaginary part of an `m = 0` harmonic vanishes and is skipped).
//!
//! Fields are evaluated from Cartesian input. The `(1/sinθ) ∂/∂φ` component
//! uses `P_n^m / sinθ` from its own recurrence, so the fields are finite and
//! continuous at the poles without clamping.

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sphere::{TangentVector, UnitVector3};

/// Highest supported harmonic degree.
pub const MAX_DEGREE: usize = 24;

/// Version tag of the canonical field ordering, stored in model files.
pub const ORDERING_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasisSpec {
    max_degree: usize,
}

impl BasisSpec {
    pub fn new(max_degree: usize) -> Result<Self> {
        if max_degree == 0 {
            return Err(Error::InvalidConfig(
                "harmonic degree must be at least 1 (degree 0 has no non-trivial fields)".into(),
            ));
        }
        if max_degree > MAX_DEGREE {
            return Err(Error::InvalidConfig(format!(
                "harmonic degree {max_degree} exceeds the supported maximum {MAX_DEGREE}"
            )));
        }
        Ok(Self { max_degree })
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    /// Number of fields, `2(l+1)² - 2`.
    pub fn count(&self) -> usize {
        let k = self.max_degree + 1;
        2 * k * k - 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldKind {
    Gradient,
    Rotated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HarmonicPart {
    Real,
    Imaginary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BasisFieldId {
    /// 1-based position in the canonical ordering.
    pub index: usize,
    pub kind: FieldKind,
    pub degree: usize,
    pub order: usize,
    pub part: HarmonicPart,
}

/// Canonical list of field ids for degree `l`.
pub fn enumerate_basis(l: usize) -> Result<(BasisSpec, Vec<BasisFieldId>)> {
    let spec = BasisSpec::new(l)?;
    let mut ids = Vec::with_capacity(spec.count());
    for kind in [FieldKind::Gradient, FieldKind::Rotated] {
        for degree in 1..=l {
            for order in 0..=degree {
                for part in [HarmonicPart::Real, HarmonicPart::Imaginary] {
                    if order == 0 && part == HarmonicPart::Imaginary {
                        continue;
                    }
                    ids.push(BasisFieldId {
                        index: ids.len() + 1,
                        kind,
                        degree,
                        order,
                        part,
                    });
                }
            }
        }
    }
    debug_assert_eq!(ids.len(), spec.count());
    Ok((spec, ids))
}

/// Associated Legendre values at one point, Condon–Shortley phase.
struct LegendreTable {
    max_degree: usize,
    /// `P_n^m(cosθ)`
    p: Vec<f64>,
    /// `P_n^m(cosθ) / sinθ` for `m ≥ 1`
    q: Vec<f64>,
}

#[inline]
fn tri(n: usize, m: usize) -> usize {
    n * (n + 1) / 2 + m
}

impl LegendreTable {
    fn new(max_degree: usize, cos_t: f64, sin_t: f64) -> Self {
        let size = tri(max_degree + 1, 0) + 1;
        let mut p = vec![0.0; size];
        let mut q = vec![0.0; size];
        // Sectoral seeds: P_m^m = (-1)^m (2m-1)!! s^m, Q_m^m = (-1)^m (2m-1)!! s^(m-1).
        let mut sect = 1.0;
        let mut sect_q = 0.0;
        for m in 0..=max_degree {
            if m > 0 {
                let f = -((2 * m - 1) as f64);
                sect_q = if m == 1 { f } else { sect_q * f * sin_t };
                sect *= f * sin_t;
            }
            p[tri(m, m)] = sect;
            q[tri(m, m)] = sect_q;
            if m < max_degree {
                let f = (2 * m + 1) as f64 * cos_t;
                p[tri(m + 1, m)] = f * sect;
                q[tri(m + 1, m)] = f * sect_q;
            }
            for n in (m + 2)..=max_degree {
                let a = (2 * n - 1) as f64 * cos_t;
                let b = (n + m - 1) as f64;
                let c = (n - m) as f64;
                p[tri(n, m)] = (a * p[tri(n - 1, m)] - b * p[tri(n - 2, m)]) / c;
                q[tri(n, m)] = (a * q[tri(n - 1, m)] - b * q[tri(n - 2, m)]) / c;
            }
        }
        Self { max_degree, p, q }
    }

    #[inline]
    fn p(&self, n: usize, m: usize) -> f64 {
        if m > n {
            0.0
        } else {
            self.p[tri(n, m)]
        }
    }

    /// `d/dθ P_n^m(cosθ)` via the ladder identity.
    #[inline]
    fn dtheta(&self, n: usize, m: usize) -> f64 {
        debug_assert!(n <= self.max_degree);
        if m == 0 {
            self.p(n, 1)
        } else {
            0.5 * (self.p(n, m + 1) - ((n + m) * (n - m + 1)) as f64 * self.p(n, m - 1))
        }
    }
}

/// Trigonometric and frame data of one point.
struct PointFrame {
    cos_t: f64,
    sin_t: f64,
    e_theta: Vector3<f64>,
    e_phi: Vector3<f64>,
    cos_m: Vec<f64>,
    sin_m: Vec<f64>,
}

impl PointFrame {
    fn new(p: &Vector3<f64>, max_degree: usize) -> Self {
        let rho = p.x.hypot(p.y);
        let sin_t = rho;
        let cos_t = p.z;
        let (cp, sp) = if rho > 0.0 {
            (p.x / rho, p.y / rho)
        } else {
            (1.0, 0.0)
        };
        let e_theta = Vector3::new(cos_t * cp, cos_t * sp, -sin_t);
        let e_phi = Vector3::new(-sp, cp, 0.0);
        let mut cos_m = Vec::with_capacity(max_degree + 1);
        let mut sin_m = Vec::with_capacity(max_degree + 1);
        let phi = sp.atan2(cp);
        for m in 0..=max_degree {
            let (s, c) = (m as f64 * phi).sin_cos();
            cos_m.push(c);
            sin_m.push(s);
        }
        Self {
            cos_t,
            sin_t,
            e_theta,
            e_phi,
            cos_m,
            sin_m,
        }
    }
}

/// Unit-L² scaling of the gradient of the orthonormal real harmonic.
fn field_scale(degree: usize, order: usize) -> f64 {
    let n = degree as f64;
    // (n-m)!/(n+m)! accumulated as a product to stay in range.
    let mut ratio = 1.0;
    for k in (degree - order + 1)..=(degree + order) {
        ratio /= k as f64;
    }
    let mut norm = ((2.0 * n + 1.0) / (4.0 * PI) * ratio).sqrt();
    if order > 0 {
        norm *= std::f64::consts::SQRT_2;
    }
    norm / (n * (n + 1.0)).sqrt()
}

#[inline]
fn gradient_vector(
    table: &LegendreTable,
    frame: &PointFrame,
    degree: usize,
    order: usize,
    part: HarmonicPart,
    scale: f64,
) -> Vector3<f64> {
    let dp = table.dtheta(degree, order);
    let mq = if order == 0 {
        0.0
    } else {
        order as f64 * table.q[tri(degree, order)]
    };
    let (c, s) = (frame.cos_m[order], frame.sin_m[order]);
    let (a_theta, a_phi) = match part {
        HarmonicPart::Real => (dp * c, -mq * s),
        HarmonicPart::Imaginary => (dp * s, mq * c),
    };
    (frame.e_theta * a_theta + frame.e_phi * a_phi) * scale
}

#[derive(Debug, Clone, Copy)]
struct HarmonicTerm {
    degree: usize,
    order: usize,
    part: HarmonicPart,
    scale: f64,
}

/// Evaluator for the full field basis of one [`BasisSpec`].
#[derive(Debug, Clone)]
pub struct HarmonicBasis {
    spec: BasisSpec,
    ids: Vec<BasisFieldId>,
    terms: Vec<HarmonicTerm>,
}

impl PartialEq for HarmonicBasis {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
    }
}

impl HarmonicBasis {
    pub fn new(spec: BasisSpec) -> Self {
        let (_, ids) = enumerate_basis(spec.max_degree()).expect("spec already validated");
        let terms = ids
            .iter()
            .take(spec.count() / 2)
            .map(|id| HarmonicTerm {
                degree: id.degree,
                order: id.order,
                part: id.part,
                scale: field_scale(id.degree, id.order),
            })
            .collect();
        Self { spec, ids, terms }
    }

    pub fn with_degree(l: usize) -> Result<Self> {
        Ok(Self::new(BasisSpec::new(l)?))
    }

    pub fn spec(&self) -> BasisSpec {
        self.spec
    }

    pub fn ids(&self) -> &[BasisFieldId] {
        &self.ids
    }

    /// Number of fields `L`.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Writes all `L` field vectors at `p` into `out` (canonical order).
    pub(crate) fn eval_into(&self, p: &Vector3<f64>, out: &mut [Vector3<f64>]) {
        debug_assert_eq!(out.len(), self.len());
        let l = self.spec.max_degree();
        let frame = PointFrame::new(p, l);
        let table = LegendreTable::new(l, frame.cos_t, frame.sin_t);
        let half = self.terms.len();
        for (k, t) in self.terms.iter().enumerate() {
            let g = gradient_vector(&table, &frame, t.degree, t.order, t.part, t.scale);
            let g = g - p * p.dot(&g);
            out[k] = g;
            out[half + k] = p.cross(&g);
        }
    }

    /// All field vectors at `p`.
    pub fn eval_all(&self, p: &UnitVector3) -> Vec<Vector3<f64>> {
        let mut out = vec![Vector3::zeros(); self.len()];
        self.eval_into(p.as_vector(), &mut out);
        out
    }

    /// Field `j` (0-based) at `p`.
    pub fn eval_field(&self, j: usize, p: &UnitVector3) -> TangentVector {
        let id = &self.ids[j];
        eval_field(id, p)
    }

    /// `Σ_j coeffs[j] B_j(p)`, accumulated in canonical order.
    pub fn combine(&self, p: &Vector3<f64>, coeffs: &[f64]) -> Vector3<f64> {
        let mut buf = vec![Vector3::zeros(); self.len()];
        self.eval_into(p, &mut buf);
        combine_fields(&buf, coeffs)
    }
}

/// `Σ_j coeffs[j] fields[j]` in index order.
#[inline]
pub(crate) fn combine_fields(fields: &[Vector3<f64>], coeffs: &[f64]) -> Vector3<f64> {
    debug_assert_eq!(fields.len(), coeffs.len());
    let mut v = Vector3::zeros();
    for (f, c) in fields.iter().zip(coeffs) {
        v += f * *c;
    }
    v
}

/// Evaluates a single basis field at `p`.
pub fn eval_field(id: &BasisFieldId, p: &UnitVector3) -> TangentVector {
    let pv = p.as_vector();
    let frame = PointFrame::new(pv, id.degree);
    let table = LegendreTable::new(id.degree, frame.cos_t, frame.sin_t);
    let g = gradient_vector(
        &table,
        &frame,
        id.degree,
        id.order,
        id.part,
        field_scale(id.degree, id.order),
    );
    let g = g - pv * pv.dot(&g);
    let v = match id.kind {
        FieldKind::Gradient => g,
        FieldKind::Rotated => pv.cross(&g),
    };
    TangentVector::from_parts(*p, v)
}

/// Field values stored field-major: entry `(j, i)` is `B_j(points[i])`.
#[derive(Debug, Clone)]
pub struct BasisMatrix {
    n_fields: usize,
    n_points: usize,
    /// point-major storage: `L` consecutive vectors per point
    data: Vec<Vector3<f64>>,
}

impl BasisMatrix {
    pub fn n_fields(&self) -> usize {
        self.n_fields
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    #[inline]
    pub fn get(&self, field: usize, point: usize) -> &Vector3<f64> {
        &self.data[point * self.n_fields + field]
    }

    /// All field vectors at one point.
    #[inline]
    pub fn at_point(&self, point: usize) -> &[Vector3<f64>] {
        &self.data[point * self.n_fields..(point + 1) * self.n_fields]
    }
}

/// Evaluates the whole basis at every point. Work is split across the
/// current rayon pool; output placement is fixed by index.
pub fn eval_basis_matrix(basis: &HarmonicBasis, points: &[Vector3<f64>]) -> BasisMatrix {
    use rayon::prelude::*;
    let l = basis.len();
    let mut data = vec![Vector3::zeros(); l * points.len()];
    data.par_chunks_mut(l.max(1))
        .zip(points.par_iter())
        .for_each(|(out, p)| basis.eval_into(p, out));
    BasisMatrix {
        n_fields: l,
        n_points: points.len(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::{polar_to_cart, PolarCoord};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_points(n: usize, seed: u64) -> Vec<UnitVector3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                UnitVector3::new(v).unwrap()
            })
            .collect()
    }

    #[test]
    fn field_counts() {
        assert_eq!(enumerate_basis(1).unwrap().1.len(), 6);
        assert_eq!(enumerate_basis(3).unwrap().1.len(), 30);
        assert_eq!(enumerate_basis(10).unwrap().1.len(), 240);
        assert!(enumerate_basis(0).is_err());
        for l in 1..=MAX_DEGREE {
            let (spec, ids) = enumerate_basis(l).unwrap();
            assert_eq!(ids.len(), 2 * (l + 1) * (l + 1) - 2);
            assert_eq!(spec.count(), ids.len());
            assert!(ids.iter().enumerate().all(|(k, id)| id.index == k + 1));
        }
    }

    #[test]
    fn canonical_order_degree_one() {
        let (_, ids) = enumerate_basis(1).unwrap();
        let got: Vec<_> = ids.iter().map(|i| (i.kind, i.degree, i.order, i.part)).collect();
        use FieldKind::*;
        use HarmonicPart::*;
        assert_eq!(
            got,
            vec![
                (Gradient, 1, 0, Real),
                (Gradient, 1, 1, Real),
                (Gradient, 1, 1, Imaginary),
                (Rotated, 1, 0, Real),
                (Rotated, 1, 1, Real),
                (Rotated, 1, 1, Imaginary),
            ]
        );
    }

    /// Explicit orthonormal real harmonics of degree ≤ 2 as polynomials, with
    /// their Euclidean gradients; projecting onto the tangent plane gives the
    /// surface gradient independently of the Legendre recurrences.
    fn polynomial_gradient(degree: usize, order: usize, part: HarmonicPart, p: &Vector3<f64>) -> Vector3<f64> {
        let (x, y, z) = (p.x, p.y, p.z);
        let c1 = (3.0 / (4.0 * PI)).sqrt();
        let c2 = (15.0 / (4.0 * PI)).sqrt();
        let c20 = (5.0 / (4.0 * PI)).sqrt();
        let c22 = (15.0 / (16.0 * PI)).sqrt();
        use HarmonicPart::*;
        let g = match (degree, order, part) {
            (1, 0, Real) => Vector3::new(0.0, 0.0, c1),
            (1, 1, Real) => Vector3::new(-c1, 0.0, 0.0),
            (1, 1, Imaginary) => Vector3::new(0.0, -c1, 0.0),
            (2, 0, Real) => Vector3::new(0.0, 0.0, c20 * 3.0 * z),
            (2, 1, Real) => Vector3::new(-c2 * z, 0.0, -c2 * x),
            (2, 1, Imaginary) => Vector3::new(0.0, -c2 * z, -c2 * y),
            (2, 2, Real) => Vector3::new(2.0 * c22 * x, -2.0 * c22 * y, 0.0),
            (2, 2, Imaginary) => Vector3::new(c2 * y, c2 * x, 0.0),
            _ => unreachable!(),
        };
        let g = g - p * p.dot(&g);
        g / ((degree * (degree + 1)) as f64).sqrt()
    }

    #[test]
    fn matches_polynomial_oracle_for_low_degree() {
        let basis = HarmonicBasis::with_degree(2).unwrap();
        let mut pts = random_points(300, 1);
        pts.push(UnitVector3::north_pole());
        pts.push(UnitVector3::from_xyz(0.0, 0.0, -1.0).unwrap());
        for p in &pts {
            let all = basis.eval_all(p);
            for (j, id) in basis.ids().iter().enumerate() {
                let g = polynomial_gradient(id.degree, id.order, id.part, p.as_vector());
                let want = match id.kind {
                    FieldKind::Gradient => g,
                    FieldKind::Rotated => p.as_vector().cross(&g),
                };
                assert!((all[j] - want).norm() < 1e-12, "field {j} at {p:?}: {} vs {}", all[j], want);
            }
        }
    }

    #[test]
    fn degree_one_zonal_points_along_theta_at_equator() {
        let basis = HarmonicBasis::with_degree(1).unwrap();
        let p = polar_to_cart(PolarCoord::new(PI / 2.0, 0.7));
        let v = basis.eval_field(0, &p);
        // ∇cosθ = -sinθ e_θ and e_θ = -z at the equator.
        let expected = (3.0 / (4.0 * PI)).sqrt() / 2f64.sqrt();
        assert!((v.vec() - Vector3::new(0.0, 0.0, expected)).norm() < 1e-15);
    }

    #[test]
    fn fields_are_tangent_and_rotated_is_cross() {
        let basis = HarmonicBasis::with_degree(10).unwrap();
        let half = basis.len() / 2;
        for p in random_points(200, 2) {
            let all = basis.eval_all(&p);
            for (j, v) in all.iter().enumerate() {
                assert!(p.as_vector().dot(v).abs() < 1e-10);
                if j < half {
                    assert_eq!(all[half + j], p.as_vector().cross(v));
                }
            }
        }
    }

    #[test]
    fn batch_matches_pointwise_bitwise() {
        let basis = HarmonicBasis::with_degree(3).unwrap();
        let pts = random_points(1000, 3);
        let raw: Vec<_> = pts.iter().map(|p| *p.as_vector()).collect();
        let mat = eval_basis_matrix(&basis, &raw);
        assert_eq!(mat.n_points(), 1000);
        assert_eq!(mat.n_fields(), 30);
        for (i, p) in pts.iter().enumerate() {
            for (j, id) in basis.ids().iter().enumerate() {
                let single = eval_field(id, p);
                assert_eq!(*single.vec(), *mat.get(j, i));
                assert!(p.as_vector().dot(single.vec()).abs() < 1e-10);
            }
        }
        let single = eval_basis_matrix(&HarmonicBasis::with_degree(1).unwrap(), &raw[..1]);
        assert_eq!(single.n_fields(), 6);
    }

    #[test]
    fn fields_are_smooth() {
        let basis = HarmonicBasis::with_degree(10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let th = rng.random_range(0.05..PI - 0.05);
            let ph = rng.random_range(0.0..2.0 * PI);
            let a = basis.eval_all(&polar_to_cart(PolarCoord::new(th, ph)));
            let b = basis.eval_all(&polar_to_cart(PolarCoord::new(th + 1e-5, ph + 1e-5)));
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).norm() < 1e-2);
            }
        }
    }

    #[test]
    fn continuous_through_the_poles() {
        let basis = HarmonicBasis::with_degree(6).unwrap();
        for pole in [1.0, -1.0] {
            let at = basis.eval_all(&UnitVector3::from_xyz(0.0, 0.0, pole).unwrap());
            for phi in [0.3, 2.0, 4.5] {
                let th = if pole > 0.0 { 1e-7 } else { PI - 1e-7 };
                let near = basis.eval_all(&polar_to_cart(PolarCoord::new(th, phi)));
                for (u, v) in at.iter().zip(&near) {
                    assert!((u - v).norm() < 1e-5, "{u} vs {v}");
                }
            }
        }
    }

    /// Midpoint quadrature of tangent-field inner products.
    fn gram(basis: &HarmonicBasis, m: usize) -> Vec<Vec<f64>> {
        let l = basis.len();
        let mut g = vec![vec![0.0; l]; l];
        let dt = PI / m as f64;
        let dp = 2.0 * PI / m as f64;
        for a in 0..m {
            let th = (a as f64 + 0.5) * dt;
            let w = th.sin() * dt * dp;
            for b in 0..m {
                let ph = (b as f64 + 0.5) * dp;
                let f = basis.eval_all(&polar_to_cart(PolarCoord::new(th, ph)));
                for i in 0..l {
                    for j in i..l {
                        g[i][j] += w * f[i].dot(&f[j]);
                    }
                }
            }
        }
        g
    }

    #[test]
    fn approximately_orthonormal_under_grid_quadrature() {
        let basis = HarmonicBasis::with_degree(3).unwrap();
        let g = gram(&basis, 200);
        let half = basis.len() / 2;
        for i in 0..basis.len() {
            assert!((g[i][i] - 1.0).abs() < 2e-2, "norm of field {i}: {}", g[i][i]);
            for j in (i + 1)..basis.len() {
                assert!(g[i][j].abs() < 5e-2, "<B{i},B{j}> = {}", g[i][j]);
            }
            if i < half {
                assert!(g[i][half + i].abs() < 2e-2);
            }
        }
    }
}
