//! File formats: CSV datasets and exports, JSON model envelopes and JSON
//! parametric map descriptions.
//!
//! Floats are written in Rust's shortest round-trip form, so every value
//! read back is bit-identical to the one written.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::baselines::{ProjectiveModel, RotationModel};
use crate::diffeo::{
    check_rotation, no_data_initial_map, random_composite, DiffeoModel, MobiusMatrix, ParametricDiffeo, SphereMap, Step, SL_TOL,
};
use crate::error::{Error, Result};
use crate::estimator::FitTrace;
use crate::evaluate::{CvCell, Pair};
use crate::harmonics::{BasisSpec, ORDERING_VERSION};
use crate::roughness::PolarGrid;
use crate::sphere::{exp_map, TangentVector, UnitVector3};

pub const SCHEMA_VERSION: u32 = 1;
/// Allowed deviation of `|x|` from 1 before a row is rejected.
pub const UNIT_TOL: f64 = 1e-6;
/// Allowed relative normal component of a tangent vector.
pub const TANGENT_TOL: f64 = 1e-6;

const PAIR_HEADER: [&str; 6] = ["x1", "x2", "x3", "y1", "y2", "y3"];
const TANGENT_HEADER: [&str; 6] = ["x1", "x2", "x3", "v1", "v2", "v3"];

/// Accepts `v` when `|v|` is within [`UNIT_TOL`] of 1. Vectors that are
/// already unit to rounding are kept bit-for-bit; others are renormalized.
pub fn near_unit(v: Vector3<f64>) -> Result<UnitVector3> {
    let n = v.norm();
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::NotUnit(format!("norm {n}, expected 1 within {UNIT_TOL}")));
    }
    if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
        Ok(UnitVector3::from_normalized(v))
    } else {
        UnitVector3::new(v)
    }
}

fn checked_unit(v: Vector3<f64>, what: &str, row: usize) -> Result<UnitVector3> {
    near_unit(v).map_err(|_| Error::Schema(format!("row {row}: {what} has norm {}, expected 1", v.norm())))
}

fn parse_row(record: &csv::StringRecord, row: usize) -> Result<[f64; 6]> {
    if record.len() != 6 {
        return Err(Error::Schema(format!("row {row}: expected 6 fields, found {}", record.len())));
    }
    let mut out = [0.0; 6];
    for (k, field) in record.iter().enumerate() {
        out[k] = field
            .trim()
            .parse()
            .map_err(|_| Error::Schema(format!("row {row}: cannot parse {field:?} as a number")))?;
    }
    Ok(out)
}

/// Reads either the paired schema `x1,x2,x3,y1,y2,y3` or the tangent schema
/// `x1,x2,x3,v1,v2,v3`, where `y = exp_x(v)`. Row numbers in errors count
/// data rows from 1.
pub fn read_dataset_from<R: Read>(reader: R) -> Result<Vec<Pair>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();
    let tangent = if header == PAIR_HEADER {
        false
    } else if header == TANGENT_HEADER {
        true
    } else {
        return Err(Error::Schema(format!(
            "unrecognized header {header:?}; expected {} or {}",
            PAIR_HEADER.join(","),
            TANGENT_HEADER.join(",")
        )));
    };
    let mut pairs = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let v = parse_row(&rec?, row)?;
        let x = checked_unit(Vector3::new(v[0], v[1], v[2]), "x", row)?;
        let second = Vector3::new(v[3], v[4], v[5]);
        let y = if tangent {
            let normal = x.as_vector().dot(&second);
            if normal.abs() > TANGENT_TOL * second.norm() {
                return Err(Error::Schema(format!(
                    "row {row}: v is not tangent at x (normal component {normal:e})"
                )));
            }
            exp_map(&x, &TangentVector::project(x, second))
        } else {
            checked_unit(second, "y", row)?
        };
        pairs.push(Pair { x, y });
    }
    Ok(pairs)
}

pub fn read_dataset(path: &Path) -> Result<Vec<Pair>> {
    read_dataset_from(BufReader::new(File::open(path)?))
}

pub fn write_dataset_to<W: Write>(writer: W, pairs: &[Pair]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(PAIR_HEADER)?;
    for p in pairs {
        let (x, y) = (p.x.as_vector(), p.y.as_vector());
        w.write_record([x.x, x.y, x.z, y.x, y.y, y.z].iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(path: &Path, pairs: &[Pair]) -> Result<()> {
    write_dataset_to(BufWriter::new(File::create(path)?), pairs)
}

/// Reads predictors only: the first three columns of a file whose header
/// starts with `x1,x2,x3`.
pub fn read_points(path: &Path) -> Result<Vec<UnitVector3>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(BufReader::new(File::open(path)?));
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();
    if header.len() < 3 || header[..3] != PAIR_HEADER[..3] {
        return Err(Error::Schema(format!("header must start with x1,x2,x3, found {header:?}")));
    }
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut v = [0.0; 3];
        for (c, slot) in v.iter_mut().enumerate() {
            let field = rec.get(c).unwrap_or("");
            *slot = field
                .parse()
                .map_err(|_| Error::Schema(format!("row {}: cannot parse {field:?} as a number", k + 1)))?;
        }
        out.push(checked_unit(Vector3::new(v[0], v[1], v[2]), "x", k + 1)?);
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, xs: &[UnitVector3], ys: &[UnitVector3]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["x1", "x2", "x3", "yhat1", "yhat2", "yhat3"])?;
    for (x, y) in xs.iter().zip(ys) {
        let (x, y) = (x.as_vector(), y.as_vector());
        w.write_record([x.x, x.y, x.z, y.x, y.y, y.z].iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// `i,j,theta,phi,theta_tilde,phi_tilde,x,y,z,x_tilde,y_tilde,z_tilde`, with
/// 1-based `i` (longitude) and `j` (colatitude) indices.
pub fn write_grid_to<W: Write>(writer: W, grid: &PolarGrid) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "i", "j", "theta", "phi", "theta_tilde", "phi_tilde", "x", "y", "z", "x_tilde", "y_tilde", "z_tilde",
    ])?;
    let m = grid.resolution();
    for i in 0..m {
        for j in 0..m {
            let (s, t) = (grid.source(i, j), grid.image(i, j));
            let mut rec = vec![(i + 1).to_string(), (j + 1).to_string()];
            rec.extend(
                [
                    grid.theta(i, j),
                    grid.phi(i, j),
                    grid.theta_tilde(i, j),
                    grid.phi_tilde(i, j),
                    s.x,
                    s.y,
                    s.z,
                    t.x,
                    t.y,
                    t.z,
                ]
                .iter()
                .map(|v| v.to_string()),
            );
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_grid(path: &Path, grid: &PolarGrid) -> Result<()> {
    write_grid_to(BufWriter::new(File::create(path)?), grid)
}

pub fn write_cv_table(path: &Path, table: &[CvCell]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["lambda", "degree", "val_mse"])?;
    for c in table {
        w.write_record([c.lambda.to_string(), c.degree.to_string(), c.val_mse.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `iter,E,f_n,R,grad_norm`; row 0 is the starting state.
pub fn write_trace_to<W: Write>(writer: W, trace: &FitTrace) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["iter", "E", "f_n", "R", "grad_norm"])?;
    for r in std::iter::once(&trace.initial).chain(&trace.records) {
        w.write_record([
            r.iter.to_string(),
            r.objective.to_string(),
            r.likelihood.to_string(),
            r.roughness.to_string(),
            r.grad_norm.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace(path: &Path, trace: &FitTrace) -> Result<()> {
    write_trace_to(BufWriter::new(File::create(path)?), trace)
}

/// Any model that can be stored in an envelope.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Diffeo(DiffeoModel),
    Rotation(RotationModel),
    Projective(ProjectiveModel),
}

impl AnyModel {
    pub fn variant(&self) -> &'static str {
        match self {
            Self::Diffeo(_) => "diffeo",
            Self::Rotation(_) => "rotation",
            Self::Projective(_) => "projective",
        }
    }
}

impl SphereMap for AnyModel {
    fn map_vector(&self, p: &Vector3<f64>) -> Vector3<f64> {
        match self {
            Self::Diffeo(m) => m.map_vector(p),
            Self::Rotation(m) => m.map_vector(p),
            Self::Projective(m) => m.map_vector(p),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Unix seconds at creation; omitted for reproducible output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BasisInfo {
    l: usize,
    ordering_version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct StepRecord {
    delta: f64,
    coeffs: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Envelope {
    schema_version: u32,
    variant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    basis: Option<BasisInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    init_rotation: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    projective: Option<Vec<f64>>,
    #[serde(default)]
    steps: Vec<StepRecord>,
    #[serde(default)]
    metadata: ModelMetadata,
}

fn row_major(m: &Matrix3<f64>) -> Vec<f64> {
    (0..3).flat_map(|r| (0..3).map(move |c| m[(r, c)])).collect()
}

fn from_row_major(v: &[f64], what: &str) -> Result<Matrix3<f64>> {
    if v.len() != 9 {
        return Err(Error::Schema(format!("{what} needs 9 entries, found {}", v.len())));
    }
    Ok(Matrix3::from_row_slice(v))
}

pub fn model_to_json(model: &AnyModel, metadata: &ModelMetadata) -> Result<String> {
    let mut env = Envelope {
        schema_version: SCHEMA_VERSION,
        variant: model.variant().to_string(),
        basis: None,
        init_rotation: None,
        projective: None,
        steps: Vec::new(),
        metadata: metadata.clone(),
    };
    match model {
        AnyModel::Diffeo(m) => {
            env.basis = Some(BasisInfo {
                l: m.spec().max_degree(),
                ordering_version: ORDERING_VERSION,
            });
            env.init_rotation = Some(row_major(m.init_rotation()));
            env.steps = m
                .steps()
                .iter()
                .map(|s| StepRecord {
                    delta: s.delta,
                    coeffs: s.coeffs.clone(),
                })
                .collect();
        }
        AnyModel::Rotation(r) => env.init_rotation = Some(row_major(&r.rotation)),
        AnyModel::Projective(p) => env.projective = Some(row_major(&p.matrix)),
    }
    let mut s = serde_json::to_string_pretty(&env)?;
    s.push('\n');
    Ok(s)
}

pub fn model_from_json(text: &str) -> Result<(AnyModel, ModelMetadata)> {
    let env: Envelope = serde_json::from_str(text)?;
    if env.schema_version != SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "model schema version {} is not supported (expected {SCHEMA_VERSION})",
            env.schema_version
        )));
    }
    let need = |v: &Option<Vec<f64>>, what: &str| -> Result<Matrix3<f64>> {
        from_row_major(
            v.as_deref()
                .ok_or_else(|| Error::Schema(format!("{} model lacks {what}", env.variant)))?,
            what,
        )
    };
    let model = match env.variant.as_str() {
        "diffeo" => {
            let basis = env.basis.as_ref().ok_or_else(|| Error::Schema("diffeo model lacks basis".into()))?;
            if basis.ordering_version != ORDERING_VERSION {
                return Err(Error::Schema(format!(
                    "basis ordering version {} is not supported (expected {ORDERING_VERSION})",
                    basis.ordering_version
                )));
            }
            let spec = BasisSpec::new(basis.l).map_err(|e| Error::Schema(e.to_string()))?;
            let rot = need(&env.init_rotation, "init_rotation")?;
            check_rotation(&rot).map_err(|e| Error::Schema(e.to_string()))?;
            let mut m = DiffeoModel::new(rot, spec)?;
            for (k, s) in env.steps.iter().enumerate() {
                if s.coeffs.len() != spec.count() {
                    return Err(Error::Schema(format!(
                        "step {}: {} coefficients, degree {} needs {}",
                        k + 1,
                        s.coeffs.len(),
                        basis.l,
                        spec.count()
                    )));
                }
                m.push_step(Step {
                    delta: s.delta,
                    coeffs: s.coeffs.clone(),
                })
                .map_err(|e| Error::Schema(format!("step {}: {e}", k + 1)))?;
            }
            AnyModel::Diffeo(m)
        }
        "rotation" => {
            let r = need(&env.init_rotation, "init_rotation")?;
            AnyModel::Rotation(RotationModel::new(r).map_err(|e| Error::Schema(e.to_string()))?)
        }
        "projective" => {
            let p = need(&env.projective, "projective")?;
            if (p.determinant() - 1.0).abs() > SL_TOL {
                return Err(Error::Schema(format!("projective matrix has det {}", p.determinant())));
            }
            AnyModel::Projective(ProjectiveModel { matrix: p })
        }
        other => return Err(Error::Schema(format!("unknown model variant {other:?}"))),
    };
    Ok((model, env.metadata))
}

pub fn write_model(path: &Path, model: &AnyModel, metadata: &ModelMetadata) -> Result<()> {
    std::fs::write(path, model_to_json(model, metadata)?)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<(AnyModel, ModelMetadata)> {
    model_from_json(&std::fs::read_to_string(path)?)
}

/// JSON description of a [`ParametricDiffeo`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MapSpec {
    Identity,
    /// Row-major 3×3; projected onto SO(3) when `nearest` is set.
    Rotation {
        matrix: Vec<f64>,
        #[serde(default)]
        nearest: bool,
    },
    /// Row-major 3×3; rescaled to unit determinant.
    Projective { matrix: Vec<f64> },
    /// Complex entries as `[re, im]`.
    Conformal {
        a: [f64; 2],
        b: [f64; 2],
        c: [f64; 2],
        d: [f64; 2],
    },
    Twist { r: f64 },
    HarmonicIncrement { l: usize, coeffs: Vec<f64> },
    /// Function-composition order: the last part is applied first.
    Composite { parts: Vec<MapSpec> },
}

impl MapSpec {
    pub fn build(&self) -> Result<ParametricDiffeo> {
        let c = |v: &[f64; 2]| Complex64::new(v[0], v[1]);
        match self {
            Self::Identity => Ok(ParametricDiffeo::Rotation(Matrix3::identity())),
            Self::Rotation { matrix, nearest } => {
                let m = from_row_major(matrix, "rotation")?;
                if *nearest {
                    Ok(ParametricDiffeo::rotation_from_approx(m))
                } else {
                    ParametricDiffeo::rotation(m)
                }
            }
            Self::Projective { matrix } => {
                let m = from_row_major(matrix, "projective")?;
                if (m.determinant() - 1.0).abs() <= SL_TOL {
                    Ok(ParametricDiffeo::ProjectiveLinear(m))
                } else {
                    ParametricDiffeo::projective(m)
                }
            }
            Self::Conformal { a, b, c: cc, d } => {
                ParametricDiffeo::conformal(MobiusMatrix::new(c(a), c(b), c(cc), c(d)))
            }
            Self::Twist { r } => {
                let t = ParametricDiffeo::twist(*r);
                t.validate()?;
                Ok(t)
            }
            Self::HarmonicIncrement { l, coeffs } => ParametricDiffeo::harmonic_increment(BasisSpec::new(*l)?, coeffs.clone()),
            Self::Composite { parts } => {
                crate::diffeo::compose(parts.iter().map(|p| p.build()).collect::<Result<Vec<_>>>()?)
            }
        }
    }

    pub fn from_diffeo(d: &ParametricDiffeo) -> Self {
        let pair = |z: Complex64| [z.re, z.im];
        match d {
            ParametricDiffeo::Rotation(r) => Self::Rotation {
                matrix: row_major(r),
                nearest: false,
            },
            ParametricDiffeo::ProjectiveLinear(p) => Self::Projective { matrix: row_major(p) },
            ParametricDiffeo::Conformal(m) => Self::Conformal {
                a: pair(m.a),
                b: pair(m.b),
                c: pair(m.c),
                d: pair(m.d),
            },
            ParametricDiffeo::Twist(r) => Self::Twist { r: *r },
            ParametricDiffeo::HarmonicIncrement { basis, coeffs } => Self::HarmonicIncrement {
                l: basis.spec().max_degree(),
                coeffs: coeffs.clone(),
            },
            ParametricDiffeo::Composite(parts) => Self::Composite {
                parts: parts.iter().map(Self::from_diffeo).collect(),
            },
        }
    }
}

pub fn read_map(path: &Path) -> Result<ParametricDiffeo> {
    let spec: MapSpec = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    spec.build()
}

pub fn write_map(path: &Path, map: &ParametricDiffeo) -> Result<()> {
    let mut s = serde_json::to_string_pretty(&MapSpec::from_diffeo(map))?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

/// Resolves a map name: `identity`, `nodata-init`, `twist:<r>`,
/// `composite` (seeded by `seed`), `composite:<seed>`, or else a path to a
/// map JSON file.
pub fn resolve_map(name: &str, seed: u64) -> Result<ParametricDiffeo> {
    if let Some(r) = name.strip_prefix("twist:") {
        let r: f64 = r
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad twist parameter {r:?}")))?;
        let t = ParametricDiffeo::twist(r);
        t.validate()?;
        return Ok(t);
    }
    if let Some(s) = name.strip_prefix("composite:") {
        let s: u64 = s
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad composite seed {s:?}")))?;
        return random_composite(s, &Default::default());
    }
    match name {
        "identity" => Ok(ParametricDiffeo::Rotation(Matrix3::identity())),
        "nodata-init" => Ok(no_data_initial_map()),
        "composite" => random_composite(seed, &Default::default()),
        path => read_map(Path::new(path)),
    }
}
