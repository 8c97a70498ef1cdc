//! Random-coefficient bivariate Gaussian model.
//!
//! For a unit observed at confounder level `z`:
//!
//! ```text
//! X = mu_x + (b_x + e_bx) z + e_x
//! Y = mu_y + (b_y + e_by) z + e_y
//! (e_bx, e_x, e_by, e_y) ~ N(0, Sigma)
//! ```
//!
//! `mu_x`, `mu_y` absorb every constant term (unit intercept averages plus the
//! mean contribution of unobserved common causes); `e_x`, `e_y` absorb the
//! corresponding fluctuations, so they may be correlated. The two cross terms
//! `cov(e_bx, e_y)` and `cov(e_by, e_x)` only enter the moments through their
//! sum and are tied to a single value `cov_bxey`.
//!
//! Given `z` the pair `(X, Y)` is bivariate normal with
//!
//! ```text
//! V(X|z)   = var_bx z^2 + 2 cov_bxex z + var_ex
//! V(Y|z)   = var_by z^2 + 2 cov_byey z + var_ey
//! C(X,Y|z) = cov_bxby z^2 + 2 cov_bxey z + cov_exey
//! ```
//!
//! `z` is used on its raw scale (no centring).

use nalgebra::{Matrix4, SymmetricEigen, Vector4};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::empirics::{Dataset, Row};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(
        "conditional covariance at z = {z} is not positive definite (eigenvalues {eigenvalues:?})"
    )]
    NotPositiveDefinite { z: f64, eigenvalues: [f64; 2] },
    #[error("Sigma is not positive semi-definite (smallest eigenvalue {min_eigenvalue})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("parameter `{0}` is not finite")]
    NonFinite(&'static str),
    #[error("variance `{0}` is negative")]
    NegativeVariance(&'static str),
    #[error("reduced model requires cov_bxby = 0, got {0}")]
    ReducedWithSlopeCovariance(f64),
    #[error("z value {0} is not finite")]
    BadZ(f64),
    #[error("no z values to simulate")]
    Empty,
    #[error("cannot read parameters: {0}")]
    Parse(String),
}

/// The nine variance/covariance terms of `Sigma` (with the cross-term tie).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceParams {
    pub var_bx: f64,
    pub var_by: f64,
    pub var_ex: f64,
    pub var_ey: f64,
    pub cov_bxby: f64,
    pub cov_exey: f64,
    pub cov_bxex: f64,
    pub cov_byey: f64,
    /// Shared value of `cov(e_bx, e_y)` and `cov(e_by, e_x)`.
    pub cov_bxey: f64,
    /// Slope covariance `cov_bxby` fixed at zero.
    #[serde(default)]
    pub reduced: bool,
}

impl CovarianceParams {
    pub const NAMES: [&'static str; 9] = [
        "var_bx", "var_by", "var_ex", "var_ey", "cov_bxby", "cov_exey", "cov_bxex", "cov_byey",
        "cov_bxey",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.var_bx,
            self.var_by,
            self.var_ex,
            self.var_ey,
            self.cov_bxby,
            self.cov_exey,
            self.cov_bxex,
            self.cov_byey,
            self.cov_bxey,
        ]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in Self::NAMES.iter().zip(self.values()) {
            if !v.is_finite() {
                return Err(ModelError::NonFinite(name));
            }
        }
        for (name, v) in Self::NAMES.iter().zip(self.values()).take(4) {
            if v < 0.0 {
                return Err(ModelError::NegativeVariance(name));
            }
        }
        if self.reduced && self.cov_bxby != 0.0 {
            return Err(ModelError::ReducedWithSlopeCovariance(self.cov_bxby));
        }
        Ok(())
    }

    /// Full 4x4 `Sigma` in the order `(e_bx, e_x, e_by, e_y)`.
    pub fn sigma(&self) -> Matrix4<f64> {
        let c = self;
        Matrix4::new(
            c.var_bx, c.cov_bxex, c.cov_bxby, c.cov_bxey, //
            c.cov_bxex, c.var_ex, c.cov_bxey, c.cov_exey, //
            c.cov_bxby, c.cov_bxey, c.var_by, c.cov_byey, //
            c.cov_bxey, c.cov_exey, c.cov_byey, c.var_ey,
        )
    }
}

/// The thirteen parameters: intercepts, mean slopes and [`CovarianceParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearModelParams {
    pub mu_x: f64,
    pub mu_y: f64,
    pub b_x: f64,
    pub b_y: f64,
    #[serde(flatten)]
    pub cov: CovarianceParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalMoments {
    pub z: f64,
    pub mean_x: f64,
    pub mean_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub cov_xy: f64,
}

impl ConditionalMoments {
    /// Eigenvalues of the 2x2 covariance, ascending.
    pub fn eigenvalues(&self) -> [f64; 2] {
        let tr = self.var_x + self.var_y;
        let half_gap = (((self.var_x - self.var_y) / 2.0).powi(2) + self.cov_xy.powi(2)).sqrt();
        [tr / 2.0 - half_gap, tr / 2.0 + half_gap]
    }

    pub fn is_positive_definite(&self) -> bool {
        self.var_x > 0.0
            && self.var_y > 0.0
            && self.var_x * self.var_y - self.cov_xy * self.cov_xy > 0.0
    }
}

impl LinearModelParams {
    pub const NAMES: [&'static str; 13] = [
        "mu_x", "mu_y", "b_x", "b_y", "var_bx", "var_by", "var_ex", "var_ey", "cov_bxby",
        "cov_exey", "cov_bxex", "cov_byey", "cov_bxey",
    ];

    /// Full-model estimates reported for the conscription data.
    pub fn strength_full() -> Self {
        Self {
            mu_x: 67.7,
            mu_y: 310.9,
            b_x: 7.4,
            b_y: 4.6,
            cov: CovarianceParams {
                var_bx: 2.24,
                var_by: 1.01,
                var_ex: 114.4,
                var_ey: 2401.0,
                cov_bxby: 0.63,
                cov_exey: -523.0,
                cov_bxex: 0.25,
                cov_byey: 0.81,
                cov_bxey: -0.23,
                reduced: false,
            },
        }
    }

    /// Reduced-model estimates reported for the conscription data. Their
    /// `Sigma` is very slightly indefinite, so they can be evaluated but not
    /// simulated from.
    pub fn strength_reduced() -> Self {
        Self {
            mu_x: 65.0,
            mu_y: 308.6,
            b_x: 7.5,
            b_y: 4.6,
            cov: CovarianceParams {
                var_bx: 2.75,
                var_by: 1.03,
                var_ex: 3213.0,
                var_ey: 2575.0,
                cov_bxby: 0.0,
                cov_exey: -2317.0,
                cov_bxex: -39.77,
                cov_byey: -1.05,
                cov_bxey: 34.5,
                reduced: true,
            },
        }
    }

    pub fn values(&self) -> [f64; 13] {
        let c = self.cov.values();
        let mut out = [0.0; 13];
        out[..4].copy_from_slice(&[self.mu_x, self.mu_y, self.b_x, self.b_y]);
        out[4..].copy_from_slice(&c);
        out
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.values()[i])
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in Self::NAMES.iter().zip(self.values()).take(4) {
            if !v.is_finite() {
                return Err(ModelError::NonFinite(name));
            }
        }
        self.cov.validate()
    }

    /// Same parameters with the slope covariance forced to zero.
    pub fn to_reduced(&self) -> Self {
        let mut p = *self;
        p.cov.cov_bxby = 0.0;
        p.cov.reduced = true;
        p
    }

    /// Moments at `z` without any definiteness check.
    pub fn raw_moments(&self, z: f64) -> ConditionalMoments {
        let c = &self.cov;
        ConditionalMoments {
            z,
            mean_x: self.mu_x + self.b_x * z,
            mean_y: self.mu_y + self.b_y * z,
            var_x: c.var_bx * z * z + 2.0 * c.cov_bxex * z + c.var_ex,
            var_y: c.var_by * z * z + 2.0 * c.cov_byey * z + c.var_ey,
            cov_xy: c.cov_bxby * z * z + 2.0 * c.cov_bxey * z + c.cov_exey,
        }
    }

    pub fn conditional_moments(&self, z: f64) -> Result<ConditionalMoments, ModelError> {
        if !z.is_finite() {
            return Err(ModelError::BadZ(z));
        }
        let m = self.raw_moments(z);
        if !m.is_positive_definite() {
            return Err(ModelError::NotPositiveDefinite {
                z,
                eigenvalues: m.eigenvalues(),
            });
        }
        Ok(m)
    }

    /// A factor `L` with `L L^T = Sigma`, built from the eigendecomposition so
    /// that singular (but PSD) matrices are accepted.
    pub fn sigma_factor(&self) -> Result<Matrix4<f64>, ModelError> {
        self.validate()?;
        let sigma = self.cov.sigma();
        let eig = SymmetricEigen::new(sigma);
        let scale = eig.eigenvalues.amax().max(1.0);
        let min = eig.eigenvalues.min();
        if min < -1e-12 * scale {
            return Err(ModelError::NotPsd {
                min_eigenvalue: min,
            });
        }
        let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        Ok(eig.eigenvectors * Matrix4::from_diagonal(&root))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("parameters serialise")
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let p: Self = toml::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}

/// One simulated unit per entry of `z_values`; unit `i` draws from stream `i`.
pub fn simulate(p: &LinearModelParams, z_values: &[f64], seed: u64) -> Result<Dataset, ModelError> {
    if z_values.is_empty() {
        return Err(ModelError::Empty);
    }
    if let Some(&z) = z_values.iter().find(|z| !z.is_finite()) {
        return Err(ModelError::BadZ(z));
    }
    let factor = p.sigma_factor()?;
    let rows: Vec<Row> = z_values
        .par_iter()
        .enumerate()
        .map(|(i, &z)| {
            let mut r = rng::stream(seed, i as u64);
            let n = Vector4::from_fn(|_, _| StandardNormal.sample(&mut r));
            let e = factor * n;
            Row {
                z,
                x: p.mu_x + (p.b_x + e[0]) * z + e[1],
                y: p.mu_y + (p.b_y + e[2]) * z + e[3],
            }
        })
        .collect();
    Ok(Dataset::from_rows(rows).expect("simulated rows are finite"))
}

/// `per_level` copies of each level, level-major.
pub fn balanced_levels(levels: &[f64], per_level: usize) -> Vec<f64> {
    levels
        .iter()
        .flat_map(|&z| std::iter::repeat_n(z, per_level))
        .collect()
}

/// `n` draws uniformly from `levels`.
pub fn uniform_levels(levels: &[f64], n: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut r = rng::stream(rng::derive_seed(seed, 0x2e7e15), 0);
    (0..n)
        .map(|_| levels[r.random_range(0..levels.len())])
        .collect()
}

/// Integer levels `lo..=hi` as floats.
pub fn integer_levels(lo: i64, hi: i64) -> Vec<f64> {
    (lo..=hi).map(|z| z as f64).collect()
}
