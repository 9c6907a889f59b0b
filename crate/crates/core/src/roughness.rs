//! Roughness of a sphere map measured on a polar grid.
//!
//! A map is sampled on an `M × M` colatitude/longitude grid. Forward
//! differences along each grid direction give a 2×2 Jacobian per cell in the
//! orthonormal `(e_θ, e_φ)` frames at source and image.
//!
//! With `A = JᵀJ` and eigenvalues `λ1 ≥ λ2`, two measures are integrated
//! against `sin θ dθ dφ`:
//!
//! * `Q = ∫ |A - I|²_F`
//! * `R = ∫ (log λ1)² + (log λ2)²`, which is `+∞` once a cell degenerates.
//!
//! Both vanish on isometries (rotations and reflections) up to grid error and
//! are invariant under post-composition with one. See [`JacobianScheme`] for
//! the two ways the image side is differenced.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;

use crate::diffeo::{Composed, LinearMap, SphereMap};
use crate::error::{Error, Result};
use crate::sphere::{colatitude, longitude, polar_to_cart, PolarCoord};

/// Grid resolution used while fitting.
pub const FIT_RESOLUTION: usize = 100;
/// Grid resolution used for reporting.
pub const REPORT_RESOLUTION: usize = 200;
pub const DEFAULT_POLE_OFFSET: f64 = 1e-2;
pub const MIN_RESOLUTION: usize = 16;
/// Eigenvalues of `JᵀJ` at or below this mark a singular cell.
pub const EIG_FLOOR: f64 = 1e-12;
/// Colatitude assigned to an image node that lands exactly on a pole.
const POLE_NUDGE: f64 = 1e-9;

/// `a - b` shifted by the multiple of π that brings it into `(-π/2, π/2]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = a - b;
    let mut r = d - PI * (d / PI).round();
    if r <= -PI / 2.0 {
        r += PI;
    } else if r > PI / 2.0 {
        r -= PI;
    }
    r
}

/// Source side of the grid: `Θ[j] = π(j + δ)/(M - 1 + 2δ)`,
/// `Φ[i] = 2π i/(M - 1)` for `i, j ∈ 0..M`.
#[derive(Debug, Clone)]
pub struct GridGeometry {
    m: usize,
    pole_offset: f64,
    theta: Vec<f64>,
    phi: Vec<f64>,
    sin_theta: Vec<f64>,
    sources: Vec<Vector3<f64>>,
    /// Inverse of the source chord matrix per colatitude row.
    source_chords_inv: Vec<Matrix2<f64>>,
}

impl GridGeometry {
    pub fn new(m: usize, pole_offset: f64) -> Result<Self> {
        if m < MIN_RESOLUTION {
            return Err(Error::InvalidConfig(format!(
                "grid resolution {m} is below the minimum {MIN_RESOLUTION}"
            )));
        }
        if !(pole_offset > 0.0 && pole_offset < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "pole offset {pole_offset} must lie in (0, 0.5)"
            )));
        }
        let mf = m as f64;
        let theta: Vec<f64> = (0..m)
            .map(|j| PI * (j as f64 + pole_offset) / (mf - 1.0 + 2.0 * pole_offset))
            .collect();
        let phi: Vec<f64> = (0..m).map(|i| TAU * i as f64 / (mf - 1.0)).collect();
        let sin_theta = theta.iter().map(|t| t.sin()).collect();
        let mut sources = Vec::with_capacity(m * m);
        for &ph in &phi {
            for &th in &theta {
                sources.push(*polar_to_cart(PolarCoord::new(th, ph)).as_vector());
            }
        }
        let source_chords_inv = (0..m - 1)
            .map(|j| {
                let s = chord_matrix(&sources[j], &sources[j + 1], &sources[m + j]);
                s.try_inverse().expect("source chords span the tangent plane")
            })
            .collect();
        Ok(Self {
            m,
            pole_offset,
            theta,
            phi,
            sin_theta,
            sources,
            source_chords_inv,
        })
    }

    pub fn resolution(&self) -> usize {
        self.m
    }

    pub fn pole_offset(&self) -> f64 {
        self.pole_offset
    }

    /// `Θ_{i,j}` (depends on `j` only).
    pub fn theta(&self, _i: usize, j: usize) -> f64 {
        self.theta[j]
    }

    /// `Φ_{i,j}` (depends on `i` only).
    pub fn phi(&self, i: usize, _j: usize) -> f64 {
        self.phi[i]
    }

    /// Cartesian grid nodes, row `i` (longitude) major.
    pub fn sources(&self) -> &[Vector3<f64>] {
        &self.sources
    }

    #[inline]
    pub(crate) fn index(&self, i: usize, j: usize) -> usize {
        i * self.m + j
    }

    /// Quadrature weight of one cell with source colatitude index `j`.
    #[inline]
    fn weight(&self, j: usize) -> f64 {
        let mf = self.m as f64;
        self.sin_theta[j] * 2.0 * PI * PI / (mf * mf)
    }
}

/// A map discretized on the polar grid: source and image angles.
#[derive(Debug, Clone)]
pub struct PolarGrid {
    geometry: GridGeometry,
    theta_tilde: Vec<f64>,
    phi_tilde: Vec<f64>,
    images: Vec<Vector3<f64>>,
    pole_hits: usize,
}

/// Image angles of a unit vector, nudging exact pole hits off the pole.
#[inline]
fn image_angles(v: &Vector3<f64>) -> (f64, f64, bool) {
    if v.x == 0.0 && v.y == 0.0 {
        let th = if v.z > 0.0 { POLE_NUDGE } else { PI - POLE_NUDGE };
        return (th, TAU, true);
    }
    (colatitude(v), longitude(v.x, v.y), false)
}

impl PolarGrid {
    /// Builds the image side from precomputed images of `geometry.sources()`.
    pub fn from_images(geometry: GridGeometry, images: Vec<Vector3<f64>>) -> Self {
        assert_eq!(images.len(), geometry.sources.len());
        let mut theta_tilde = Vec::with_capacity(images.len());
        let mut phi_tilde = Vec::with_capacity(images.len());
        let mut pole_hits = 0;
        for v in &images {
            let (t, p, hit) = image_angles(v);
            theta_tilde.push(t);
            phi_tilde.push(p);
            pole_hits += hit as usize;
        }
        if pole_hits > 0 {
            log::warn!("{pole_hits} grid node(s) mapped onto a pole; colatitude nudged by {POLE_NUDGE}");
        }
        Self {
            geometry,
            theta_tilde,
            phi_tilde,
            images,
            pole_hits,
        }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn resolution(&self) -> usize {
        self.geometry.m
    }

    pub fn theta(&self, i: usize, j: usize) -> f64 {
        self.geometry.theta(i, j)
    }

    pub fn phi(&self, i: usize, j: usize) -> f64 {
        self.geometry.phi(i, j)
    }

    pub fn theta_tilde(&self, i: usize, j: usize) -> f64 {
        self.theta_tilde[self.geometry.index(i, j)]
    }

    pub fn phi_tilde(&self, i: usize, j: usize) -> f64 {
        self.phi_tilde[self.geometry.index(i, j)]
    }

    pub fn source(&self, i: usize, j: usize) -> &Vector3<f64> {
        &self.geometry.sources[self.geometry.index(i, j)]
    }

    pub fn image(&self, i: usize, j: usize) -> &Vector3<f64> {
        &self.images[self.geometry.index(i, j)]
    }

    /// Number of nodes whose image fell exactly on a pole.
    pub fn pole_hits(&self) -> usize {
        self.pole_hits
    }
}

/// Samples `gamma` on a fresh `m × m` grid.
pub fn deform_grid<G: SphereMap + ?Sized>(gamma: &G, m: usize, pole_offset: f64) -> Result<PolarGrid> {
    let geometry = GridGeometry::new(m, pole_offset)?;
    let images = map_points(gamma, geometry.sources());
    Ok(PolarGrid::from_images(geometry, images))
}

/// Applies a map to many points in parallel with fixed output placement.
pub fn map_points<G: SphereMap + ?Sized>(gamma: &G, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    points.par_iter().map(|p| gamma.map_vector(p)).collect()
}

/// Per-cell Jacobians and eigenvalues of `JᵀJ` over `(M-1)²` cells.
#[derive(Debug, Clone)]
pub struct JacobianField {
    cells: usize,
    pub jacobians: Vec<Matrix2<f64>>,
    pub eigen1: Vec<f64>,
    pub eigen2: Vec<f64>,
}

impl JacobianField {
    /// Cells per side, `M - 1`.
    pub fn cells_per_side(&self) -> usize {
        self.cells
    }

    pub fn jacobian(&self, i: usize, j: usize) -> &Matrix2<f64> {
        &self.jacobians[i * self.cells + j]
    }
}

/// How image-side derivatives are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JacobianScheme {
    /// Forward chords of the Cartesian images, read off in the orthonormal
    /// `(e_θ̃, e_φ̃)` frame at the image node, mapped back through the matching
    /// source chords. Free of chart singularities at image poles; the identity
    /// gives `J = I` and an isometry gives an orthogonal `J`, up to rounding.
    #[default]
    Embedded,
    /// Forward differences of `(θ̃, φ̃)` through [`angle_diff`], scaled by
    /// `sin θ̃` at the node. Loses accuracy in cells near an image pole.
    PolarChart,
}

/// Orthonormal `(e_θ, e_φ)` at a unit vector; an arbitrary frame on the axis.
#[inline]
fn polar_frame(p: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let rho = p.x.hypot(p.y);
    if rho == 0.0 {
        return (Vector3::x(), Vector3::y());
    }
    (
        Vector3::new(p.x * p.z / rho, p.y * p.z / rho, -rho),
        Vector3::new(-p.y / rho, p.x / rho, 0.0),
    )
}

/// Chords `up - p` and `right - p` as columns, in the frame at `p`.
#[inline]
fn chord_matrix(p: &Vector3<f64>, up: &Vector3<f64>, right: &Vector3<f64>) -> Matrix2<f64> {
    let (c1, c2) = (up - p, right - p);
    let (e_t, e_p) = polar_frame(p);
    Matrix2::new(e_t.dot(&c1), e_t.dot(&c2), e_p.dot(&c1), e_p.dot(&c2))
}

#[inline]
fn cell_jacobian_embedded(geo: &GridGeometry, images: &[Vector3<f64>], i: usize, j: usize) -> Matrix2<f64> {
    let t = chord_matrix(
        &images[geo.index(i, j)],
        &images[geo.index(i, j + 1)],
        &images[geo.index(i + 1, j)],
    );
    t * geo.source_chords_inv[j]
}

#[inline]
fn cell_jacobian_chart(
    geo: &GridGeometry,
    theta_tilde: &[f64],
    phi_tilde: &[f64],
    i: usize,
    j: usize,
) -> Matrix2<f64> {
    let here = geo.index(i, j);
    let up = geo.index(i, j + 1);
    let right = geo.index(i + 1, j);
    let d_theta = angle_diff(geo.theta[j], geo.theta[j + 1]);
    let d_phi = angle_diff(geo.phi[i], geo.phi[i + 1]);
    let tt = theta_tilde[here];
    let pt = phi_tilde[here];
    let dtt_dt = angle_diff(tt, theta_tilde[up]) / d_theta;
    let dtt_dp = angle_diff(tt, theta_tilde[right]) / d_phi;
    let dpt_dt = angle_diff(pt, phi_tilde[up]) / d_theta;
    let dpt_dp = angle_diff(pt, phi_tilde[right]) / d_phi;
    let s_img = tt.sin();
    let s_src = geo.sin_theta[j];
    Matrix2::new(
        dtt_dt,
        dtt_dp / s_src,
        s_img * dpt_dt,
        s_img * dpt_dp / s_src,
    )
}

#[inline]
fn cell_jacobian(grid: &PolarGrid, scheme: JacobianScheme, i: usize, j: usize) -> Matrix2<f64> {
    match scheme {
        JacobianScheme::Embedded => cell_jacobian_embedded(&grid.geometry, &grid.images, i, j),
        JacobianScheme::PolarChart => {
            cell_jacobian_chart(&grid.geometry, &grid.theta_tilde, &grid.phi_tilde, i, j)
        }
    }
}

/// Eigenvalues `λ1 ≥ λ2` of `JᵀJ` from the closed-form quadratic; the
/// smaller one is taken as `det/λ1` to avoid cancellation.
#[inline]
pub fn metric_eigenvalues(j: &Matrix2<f64>) -> (f64, f64) {
    let a = j.transpose() * j;
    let tr = a[(0, 0)] + a[(1, 1)];
    let det_j = j[(0, 0)] * j[(1, 1)] - j[(0, 1)] * j[(1, 0)];
    let det = det_j * det_j;
    let disc = (tr * tr - 4.0 * det).max(0.0);
    let l1 = 0.5 * (tr + disc.sqrt());
    let l2 = if l1 > 0.0 { det / l1 } else { 0.0 };
    (l1, l2)
}

pub fn numerical_jacobian(grid: &PolarGrid) -> JacobianField {
    numerical_jacobian_with(grid, JacobianScheme::default())
}

pub fn numerical_jacobian_with(grid: &PolarGrid, scheme: JacobianScheme) -> JacobianField {
    let cells = grid.geometry.m - 1;
    let rows: Vec<Vec<(Matrix2<f64>, f64, f64)>> = (0..cells)
        .into_par_iter()
        .map(|i| {
            (0..cells)
                .map(|j| {
                    let jac = cell_jacobian(grid, scheme, i, j);
                    let (l1, l2) = metric_eigenvalues(&jac);
                    (jac, l1, l2)
                })
                .collect()
        })
        .collect();
    let mut field = JacobianField {
        cells,
        jacobians: Vec::with_capacity(cells * cells),
        eigen1: Vec::with_capacity(cells * cells),
        eigen2: Vec::with_capacity(cells * cells),
    };
    for (jac, l1, l2) in rows.into_iter().flatten() {
        field.jacobians.push(jac);
        field.eigen1.push(l1);
        field.eigen2.push(l2);
    }
    field
}

#[inline]
fn q_integrand(j: &Matrix2<f64>) -> f64 {
    let a = j.transpose() * j - Matrix2::identity();
    a.norm_squared()
}

#[inline]
fn is_singular(l1: f64, l2: f64) -> bool {
    !(l2 > EIG_FLOOR) || !l1.is_finite()
}

#[inline]
fn r_integrand(l1: f64, l2: f64) -> f64 {
    let (a, b) = (l1.ln(), l2.ln());
    a * a + b * b
}

/// `Q(γ)` by the grid quadrature.
pub fn roughness_q(field: &JacobianField, grid: &PolarGrid) -> f64 {
    let cells = field.cells;
    let mut total = 0.0;
    for i in 0..cells {
        let mut row = 0.0;
        for j in 0..cells {
            row += q_integrand(field.jacobian(i, j)) * grid.geometry.weight(j);
        }
        total += row;
    }
    total
}

/// `R(γ)` by the grid quadrature; `+∞` when any cell is singular.
pub fn roughness_r(field: &JacobianField, grid: &PolarGrid) -> f64 {
    let cells = field.cells;
    let mut total = 0.0;
    for i in 0..cells {
        let mut row = 0.0;
        for j in 0..cells {
            let k = i * cells + j;
            let (l1, l2) = (field.eigen1[k], field.eigen2[k]);
            if is_singular(l1, l2) {
                return f64::INFINITY;
            }
            row += r_integrand(l1, l2) * grid.geometry.weight(j);
        }
        total += row;
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoughnessReport {
    pub q: f64,
    pub r: f64,
    pub singular_cell_count: usize,
}

/// Fused Jacobian + quadrature over a cell kernel; rows are reduced in
/// parallel and summed in fixed order so the result does not depend on the
/// thread count.
fn fused_report<F>(geo: &GridGeometry, jacobian: F) -> RoughnessReport
where
    F: Fn(usize, usize) -> Matrix2<f64> + Sync,
{
    let cells = geo.m - 1;
    let rows: Vec<(f64, f64, usize)> = (0..cells)
        .into_par_iter()
        .map(|i| {
            let (mut q, mut r, mut singular) = (0.0, 0.0, 0usize);
            for j in 0..cells {
                let jac = jacobian(i, j);
                let (l1, l2) = metric_eigenvalues(&jac);
                let w = geo.weight(j);
                q += q_integrand(&jac) * w;
                if is_singular(l1, l2) {
                    singular += 1;
                } else {
                    r += r_integrand(l1, l2) * w;
                }
            }
            (q, r, singular)
        })
        .collect();
    let (mut q, mut r, mut singular) = (0.0, 0.0, 0usize);
    for (rq, rr, rs) in rows {
        q += rq;
        r += rr;
        singular += rs;
    }
    RoughnessReport {
        q,
        r: if singular > 0 { f64::INFINITY } else { r },
        singular_cell_count: singular,
    }
}

pub fn roughness_report(grid: &PolarGrid) -> RoughnessReport {
    roughness_report_with(grid, JacobianScheme::default())
}

pub fn roughness_report_with(grid: &PolarGrid, scheme: JacobianScheme) -> RoughnessReport {
    fused_report(&grid.geometry, |i, j| cell_jacobian(grid, scheme, i, j))
}

/// Roughness computed directly from images of `geo.sources()`.
pub(crate) fn report_from_images(geo: &GridGeometry, images: &[Vector3<f64>]) -> RoughnessReport {
    debug_assert_eq!(images.len(), geo.sources.len());
    fused_report(geo, |i, j| cell_jacobian_embedded(geo, images, i, j))
}

/// `∂f/∂A` for `f(A) = (log λ1)² + (log λ2)²`, i.e. `2 log(A) A⁻¹`, via the
/// 2×2 spectral formula.
#[inline]
fn r_integrand_grad(a: &Matrix2<f64>, l1: f64, l2: f64) -> Matrix2<f64> {
    let g = |l: f64| 2.0 * l.ln() / l;
    let id = Matrix2::identity();
    if (l1 - l2).abs() > 1e-6 * l1 {
        let slope = (g(l1) - g(l2)) / (l1 - l2);
        (a - id * l2) * slope + id * g(l2)
    } else {
        let m = 0.5 * (l1 + l2);
        let dg = 2.0 * (1.0 - m.ln()) / (m * m);
        (a - id * m) * dg + id * g(m)
    }
}

/// `R` together with `∂R/∂image` at every grid node, for the embedded scheme.
/// The directional derivative of `R` along a tangent field `V` on the images
/// is `Σ_k grad[k] · V(image_k)`. Returns `None` for the gradient when `R` is
/// infinite.
pub(crate) fn roughness_with_gradient(
    geo: &GridGeometry,
    images: &[Vector3<f64>],
) -> (RoughnessReport, Option<Vec<Vector3<f64>>>) {
    let report = report_from_images(geo, images);
    if !report.r.is_finite() {
        return (report, None);
    }
    let m = geo.m;
    let cells = m - 1;
    // Per-cell contributions to (p, up, right).
    let contrib: Vec<[Vector3<f64>; 3]> = (0..cells * cells)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / cells, k % cells);
            let p = images[geo.index(i, j)];
            let c1 = images[geo.index(i, j + 1)] - p;
            let c2 = images[geo.index(i + 1, j)] - p;
            let pc1 = c1 - p * p.dot(&c1);
            let pc2 = c2 - p * p.dot(&c2);
            let s_inv = geo.source_chords_inv[j];
            let gram = Matrix2::new(pc1.dot(&pc1), pc1.dot(&pc2), pc2.dot(&pc1), pc2.dot(&pc2));
            let a = s_inv.transpose() * gram * s_inv;
            let jac = cell_jacobian_embedded(geo, images, i, j);
            let (l1, l2) = metric_eigenvalues(&jac);
            let g = r_integrand_grad(&a, l1, l2) * geo.weight(j);
            let h = s_inv * g * s_inv.transpose();
            // d tr(H CᵀPC) = 2⟨PCH, dC⟩ - 2 dpᵀ C H Cᵀ p
            let k_up = (pc1 * h[(0, 0)] + pc2 * h[(1, 0)]) * 2.0;
            let k_right = (pc1 * h[(0, 1)] + pc2 * h[(1, 1)]) * 2.0;
            let (cp1, cp2) = (c1.dot(&p), c2.dot(&p));
            let chc_p = (c1 * (h[(0, 0)] * cp1 + h[(0, 1)] * cp2) + c2 * (h[(1, 0)] * cp1 + h[(1, 1)] * cp2)) * 2.0;
            let k_p = -k_up - k_right - chc_p;
            [k_p, k_up, k_right]
        })
        .collect();
    let grad: Vec<Vector3<f64>> = (0..m * m)
        .into_par_iter()
        .map(|node| {
            let (i, j) = (node / m, node % m);
            let mut g = Vector3::zeros();
            if i < cells && j < cells {
                g += contrib[i * cells + j][0];
            }
            if i < cells && j >= 1 {
                g += contrib[i * cells + j - 1][1];
            }
            if i >= 1 && j < cells {
                g += contrib[(i - 1) * cells + j][2];
            }
            g
        })
        .collect();
    (report, Some(grad))
}

/// Samples `gamma` and returns both roughness measures.
pub fn roughness<G: SphereMap + ?Sized>(gamma: &G, m: usize, pole_offset: f64) -> Result<RoughnessReport> {
    Ok(roughness_report(&deform_grid(gamma, m, pole_offset)?))
}

/// `(R(γ), R(O∘γ))` for an orthogonal `o`.
pub fn roughness_invariance_check<G: SphereMap>(
    gamma: &G,
    o: &Matrix3<f64>,
    m: usize,
    pole_offset: f64,
) -> Result<(f64, f64)> {
    let ortho = (o.transpose() * o - Matrix3::identity()).abs().max();
    if ortho > 1e-10 {
        return Err(Error::InvalidConfig(format!("matrix is not orthogonal ({ortho:.2e})")));
    }
    let base = roughness(gamma, m, pole_offset)?.r;
    let composed = Composed {
        outer: LinearMap(*o),
        inner: gamma,
    };
    let moved = roughness(&composed, m, pole_offset)?.r;
    Ok((base, moved))
}
