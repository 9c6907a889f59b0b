//! von Mises-Fisher sampling, the synthetic regression protocol and the
//! no-data roughness experiment.
//!
//! Samples around a mean `μ` are drawn around `e_z` and then carried to `μ`
//! by an orthonormal frame whose third column is `μ`. The cosine to the mean
//! uses the closed-form inverse CDF on S²,
//! `w = 1 + κ⁻¹ log(u + (1 - u) e^{-2κ})`, so every sample consumes exactly
//! two uniforms.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffeo::{ParametricDiffeo, SphereMap, Step};
use crate::error::{Error, Result};
use crate::estimator::{fit_from_map, FitConfig, FitTrace};
use crate::evaluate::{Dataset, Pair, Role};
use crate::sphere::UnitVector3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VmfParams {
    pub mean: UnitVector3,
    pub kappa: f64,
}

impl VmfParams {
    pub fn new(mean: UnitVector3, kappa: f64) -> Result<Self> {
        if !(kappa >= 0.0) || kappa.is_nan() {
            return Err(Error::InvalidConfig(format!("concentration must be non-negative, got {kappa}")));
        }
        Ok(Self { mean, kappa })
    }

    /// `log C₃(κ)` with `C₃(κ) = κ / (4π sinh κ)`.
    pub fn log_normalizer(&self) -> f64 {
        log_normalizer(self.kappa)
    }

    pub fn log_density(&self, x: &UnitVector3) -> f64 {
        self.log_normalizer() + self.kappa * self.mean.dot(x)
    }
}

/// `log C₃(κ)`, stable for large κ.
pub fn log_normalizer(kappa: f64) -> f64 {
    if kappa == 0.0 {
        return -(4.0 * PI).ln();
    }
    if kappa < 1e-6 {
        // sinh κ / κ = 1 + κ²/6 + …
        return -(4.0 * PI).ln() - kappa * kappa / 6.0;
    }
    // log sinh κ = κ + log(1 - e^{-2κ}) - log 2
    let log_sinh = kappa + (-(-2.0 * kappa).exp()).ln_1p() - std::f64::consts::LN_2;
    kappa.ln() - (4.0 * PI).ln() - log_sinh
}

/// `C₃(κ) = κ / (4π sinh κ)`.
pub fn normalizer(kappa: f64) -> f64 {
    log_normalizer(kappa).exp()
}

/// Mean resultant length `A₃(κ) = coth κ - 1/κ`.
pub fn mean_resultant_length(kappa: f64) -> f64 {
    if kappa < 1e-4 {
        return kappa / 3.0 - kappa.powi(3) / 45.0;
    }
    1.0 / kappa.tanh() - 1.0 / kappa
}

/// Expected `|y - μ|²` under vMF noise, `2(1 - A₃(κ))`.
pub fn expected_squared_error(kappa: f64) -> f64 {
    2.0 * (1.0 - mean_resultant_length(kappa))
}

/// Orthonormal frame with `μ` as third column.
pub fn frame_for(mean: &UnitVector3) -> Matrix3<f64> {
    let m = mean.as_vector();
    let helper = if m.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = (helper - m * m.dot(&helper)).normalize();
    let v = m.cross(&u);
    Matrix3::from_columns(&[u, v, *m])
}

/// One vMF draw around `e_z`.
fn sample_about_pole<R: Rng>(rng: &mut R, kappa: f64) -> Vector3<f64> {
    let u: f64 = 1.0 - rng.random::<f64>();
    let w = if kappa == 0.0 {
        2.0 * u - 1.0
    } else {
        (1.0 + (u + (1.0 - u) * (-2.0 * kappa).exp()).ln() / kappa).clamp(-1.0, 1.0)
    };
    let psi = TAU * rng.random::<f64>();
    let r = (1.0 - w * w).max(0.0).sqrt();
    Vector3::new(r * psi.cos(), r * psi.sin(), w)
}

pub(crate) fn sample_in_frame<R: Rng>(rng: &mut R, frame: &Matrix3<f64>, kappa: f64) -> UnitVector3 {
    let v = frame * sample_about_pole(rng, kappa);
    UnitVector3::new(v).expect("rotated unit vector")
}

/// `n` draws from `vMF(mean, κ)`; `κ = 0` is uniform.
pub fn vmf_sample(params: &VmfParams, n: usize, seed: u64) -> Vec<UnitVector3> {
    vmf_sample_in_frame(&frame_for(&params.mean), params.kappa, n, seed)
}

/// As [`vmf_sample`] with an explicit frame whose third column is the mean.
/// For a rotation `R`, the frame `R F` gives `R` times the draws of `F`.
pub fn vmf_sample_in_frame(frame: &Matrix3<f64>, kappa: f64, n: usize, seed: u64) -> Vec<UnitVector3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_in_frame(&mut rng, frame, kappa)).collect()
}

/// Uniform draws from normalized Gaussian triples.
pub fn uniform_sample<R: Rng>(rng: &mut R, n: usize) -> Vec<UnitVector3> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v = Vector3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        );
        if let Ok(p) = UnitVector3::new(v) {
            out.push(p);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictorLaw {
    Vmf(VmfParams),
    Uniform,
}

impl PredictorLaw {
    fn draw<R: Rng>(&self, rng: &mut R, n: usize) -> Vec<UnitVector3> {
        match self {
            Self::Uniform => uniform_sample(rng, n),
            Self::Vmf(p) => {
                let frame = frame_for(&p.mean);
                (0..n).map(|_| sample_in_frame(rng, &frame, p.kappa)).collect()
            }
        }
    }
}

/// Synthetic regression design: predictors from a law per role, responses
/// `yᵢ ~ vMF(γ₀(xᵢ), κ_y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimProtocol {
    pub n_train: usize,
    pub n_test: usize,
    pub train_law: PredictorLaw,
    pub test_law: PredictorLaw,
    pub response_kappa: f64,
    pub truth: ParametricDiffeo,
    pub seed: u64,
}

impl SimProtocol {
    /// 200 training predictors from `vMF(e_z, 5)`, 100 uniform test
    /// predictors, response concentration 100.
    pub fn standard(truth: ParametricDiffeo, seed: u64) -> Self {
        Self {
            n_train: 200,
            n_test: 100,
            train_law: PredictorLaw::Vmf(VmfParams {
                mean: UnitVector3::north_pole(),
                kappa: 5.0,
            }),
            test_law: PredictorLaw::Uniform,
            response_kappa: 100.0,
            truth,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 && self.n_test == 0 {
            return Err(Error::InvalidConfig("protocol draws no pairs".into()));
        }
        if !(self.response_kappa >= 0.0) {
            return Err(Error::InvalidConfig("response concentration must be non-negative".into()));
        }
        self.truth.validate()
    }
}

/// Draws train then test predictors, then all responses, from one stream.
pub fn generate_dataset(protocol: &SimProtocol) -> Result<Dataset> {
    protocol.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let mut xs = protocol.train_law.draw(&mut rng, protocol.n_train);
    xs.extend(protocol.test_law.draw(&mut rng, protocol.n_test));
    let pairs: Vec<Pair> = xs
        .into_iter()
        .map(|x| {
            let mean = protocol.truth.apply(&x);
            let y = sample_in_frame(&mut rng, &frame_for(&mean), protocol.response_kappa);
            Pair { x, y }
        })
        .collect();
    let mut roles = vec![Role::Train; protocol.n_train];
    roles.extend(std::iter::repeat_n(Role::Test, protocol.n_test));
    Dataset::with_roles(pairs, roles)
}

#[derive(Debug, Clone)]
pub struct NoDataRun {
    pub steps: Vec<Step>,
    pub trace: FitTrace,
}

/// Roughness-only ascent (`f_n ≡ 0`) starting from `init`.
pub fn run_no_data_experiment(init: &ParametricDiffeo, config: &FitConfig) -> Result<NoDataRun> {
    init.validate()?;
    if !(config.lambda > 0.0) {
        return Err(Error::InvalidConfig("the no-data experiment needs lambda > 0".into()));
    }
    let (steps, trace) = fit_from_map(init, &[], config)?;
    Ok(NoDataRun { steps, trace })
}
