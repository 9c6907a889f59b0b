//! Datasets, the squared-chord MSE, splitting and cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimator::{fit, predict, FitConfig};
use crate::sphere::UnitVector3;

/// One predictor/response observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub x: UnitVector3,
    pub y: UnitVector3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Train,
    Validation,
    Test,
}

/// Pairs with a role per pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<Pair>,
    pub roles: Vec<Role>,
}

impl Dataset {
    /// All pairs tagged [`Role::Train`].
    pub fn new(pairs: Vec<Pair>) -> Self {
        let roles = vec![Role::Train; pairs.len()];
        Self { pairs, roles }
    }

    pub fn with_roles(pairs: Vec<Pair>, roles: Vec<Role>) -> Result<Self> {
        if pairs.len() != roles.len() {
            return Err(Error::LengthMismatch {
                left: pairs.len(),
                right: roles.len(),
            });
        }
        Ok(Self { pairs, roles })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs with the given role, in dataset order.
    pub fn subset(&self, role: Role) -> Vec<Pair> {
        self.pairs
            .iter()
            .zip(&self.roles)
            .filter(|(_, r)| **r == role)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn count(&self, role: Role) -> usize {
        self.roles.iter().filter(|r| **r == role).count()
    }
}

/// `n⁻¹ Σ |yᵢ - ŷᵢ|²`, in `[0, 4]`.
pub fn mse(y_true: &[UnitVector3], y_hat: &[UnitVector3]) -> Result<f64> {
    if y_true.len() != y_hat.len() {
        return Err(Error::LengthMismatch {
            left: y_true.len(),
            right: y_hat.len(),
        });
    }
    if y_true.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut s = 0.0;
    for (a, b) in y_true.iter().zip(y_hat) {
        s += (a.as_vector() - b.as_vector()).norm_squared();
    }
    Ok(s / y_true.len() as f64)
}

/// Shuffles by `seed` and assigns roles in the order train, validation, test
/// with the given fractions. Boundaries are rounded cumulative counts.
pub fn split(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Dataset> {
    if fractions.is_empty() || fractions.len() > 3 || fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::InvalidConfig(format!(
            "need one to three non-negative fractions, got {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("fractions sum to {total}, not 1")));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let role_of = [Role::Train, Role::Validation, Role::Test];
    let mut roles = vec![Role::Test; n];
    let mut start = 0;
    let mut cum = 0.0;
    for (k, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if k + 1 == fractions.len() {
            n
        } else {
            ((n as f64) * cum).round() as usize
        };
        for &idx in &order[start..end.max(start)] {
            roles[idx] = role_of[k];
        }
        start = end.max(start);
    }
    Dataset::with_roles(dataset.pairs.clone(), roles)
}

/// How the training data is divided during cross-validation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Validation {
    /// One shuffled split; `fit_fraction` of the pairs fit, the rest validate.
    Holdout { fit_fraction: f64 },
    /// Mean validation MSE over `k` shuffled folds.
    KFold { k: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvPlan {
    pub lambda_grid: Vec<f64>,
    pub degree_grid: Vec<usize>,
    pub validation: Validation,
    pub seed: u64,
}

impl CvPlan {
    pub fn holdout(lambda_grid: Vec<f64>, degree_grid: Vec<usize>, seed: u64) -> Self {
        Self {
            lambda_grid,
            degree_grid,
            validation: Validation::Holdout { fit_fraction: 0.75 },
            seed,
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.lambda_grid.is_empty() || self.degree_grid.is_empty() {
            return Err(Error::InvalidConfig("CV grids must be non-empty".into()));
        }
        if self.lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidConfig("lambda grid must be finite and non-negative".into()));
        }
        match self.validation {
            Validation::Holdout { fit_fraction } => {
                let n_fit = ((n as f64) * fit_fraction).round() as usize;
                if !(fit_fraction > 0.0 && fit_fraction < 1.0) || n_fit < 2 || n_fit >= n {
                    return Err(Error::InvalidConfig(format!(
                        "holdout fraction {fit_fraction} leaves no usable fit/validation split of {n} pairs"
                    )));
                }
            }
            Validation::KFold { k } => {
                if k < 2 || k > n {
                    return Err(Error::InvalidConfig(format!("k = {k} folds for {n} pairs")));
                }
            }
        }
        Ok(())
    }

    /// `(fit, validation)` index sets.
    fn folds(&self, n: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        match self.validation {
            Validation::Holdout { fit_fraction } => {
                let n_fit = ((n as f64) * fit_fraction).round() as usize;
                vec![(order[..n_fit].to_vec(), order[n_fit..].to_vec())]
            }
            Validation::KFold { k } => (0..k)
                .map(|f| {
                    let (lo, hi) = (f * n / k, (f + 1) * n / k);
                    let val = order[lo..hi].to_vec();
                    let fit = order[..lo].iter().chain(&order[hi..]).copied().collect();
                    (fit, val)
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvCell {
    pub lambda: f64,
    pub degree: usize,
    /// `+∞` when the fit failed.
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub best_lambda: f64,
    pub best_degree: usize,
    /// Row-major over `degree_grid × lambda_grid`.
    pub table: Vec<CvCell>,
}

/// Index of the minimum-MSE cell; ties go to larger λ, then smaller degree.
fn select(table: &[CvCell]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in table.iter().enumerate() {
        if !c.val_mse.is_finite() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let o = &table[b];
                let better = c.val_mse < o.val_mse
                    || (c.val_mse == o.val_mse
                        && (c.lambda > o.lambda || (c.lambda == o.lambda && c.degree < o.degree)));
                Some(if better { i } else { b })
            }
        };
    }
    best
}

/// Fits every `(λ, l)` cell on the fit part of `train` and scores it on the
/// held-out part. Cell `k` uses seed `template.seed + k`.
pub fn cross_validate(train: &[Pair], plan: &CvPlan, template: &FitConfig) -> Result<CvResult> {
    plan.validate(train.len())?;
    let folds = plan.folds(train.len());
    let cells: Vec<(f64, usize)> = plan
        .degree_grid
        .iter()
        .flat_map(|&l| plan.lambda_grid.iter().map(move |&lam| (lam, l)))
        .collect();
    let table: Vec<CvCell> = cells
        .par_iter()
        .enumerate()
        .map(|(k, &(lambda, degree))| {
            let cfg = FitConfig {
                lambda,
                degree,
                seed: template.seed.wrapping_add(k as u64),
                ..template.clone()
            };
            let mut total = 0.0;
            for (fit_idx, val_idx) in &folds {
                let fit_set: Vec<Pair> = fit_idx.iter().map(|&i| train[i]).collect();
                let val_set: Vec<Pair> = val_idx.iter().map(|&i| train[i]).collect();
                let score = fit(&fit_set, &cfg).and_then(|(model, _)| {
                    let xs: Vec<UnitVector3> = val_set.iter().map(|p| p.x).collect();
                    let ys: Vec<UnitVector3> = val_set.iter().map(|p| p.y).collect();
                    mse(&ys, &predict(&model, &xs))
                });
                match score {
                    Ok(v) => total += v,
                    Err(e) => {
                        log::warn!("CV cell lambda={lambda} degree={degree} failed: {e}");
                        total = f64::INFINITY;
                        break;
                    }
                }
            }
            CvCell {
                lambda,
                degree,
                val_mse: total / folds.len() as f64,
            }
        })
        .collect();
    let best = select(&table).ok_or_else(|| Error::DegenerateData("every CV cell failed".into()))?;
    Ok(CvResult {
        best_lambda: table[best].lambda,
        best_degree: table[best].degree,
        table,
    })
}
