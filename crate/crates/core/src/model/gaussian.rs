//! Gaussian and Gaussian-mixture emission densities.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logspace::{log_sum_exp_iter, LOG_ZERO};

/// Lower bound on variances (squared sensor units) enforced after every
/// covariance update.
pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-6;

const SYMMETRY_TOL: f64 = 1e-9;
const WEIGHT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    #[default]
    Diagonal,
    Full,
}

/// One multivariate normal component.
///
/// The covariance is kept as a dense row-major `D x D` matrix in both modes;
/// in diagonal mode the off-diagonal entries are zero.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    mean: Vec<f64>,
    covariance: Vec<f64>,
    mode: CovarianceMode,
    // -0.5 * (D ln 2pi + ln |Sigma|)
    log_norm: f64,
    // diagonal: inverse variances; full: inverse of the lower Cholesky factor
    whitening: Vec<f64>,
}

impl PartialEq for GaussianComponent {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.covariance == other.covariance && self.mode == other.mode
    }
}

impl GaussianComponent {
    pub fn new(mean: Vec<f64>, covariance: Vec<f64>, mode: CovarianceMode) -> Result<Self> {
        let dim = mean.len();
        if dim == 0 {
            return Err(Error::invalid("gaussian component needs dimension >= 1"));
        }
        if covariance.len() != dim * dim {
            return Err(Error::invalid(format!(
                "covariance has {} entries, expected {}",
                covariance.len(),
                dim * dim
            )));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Invariant("non-finite gaussian parameter".into()));
        }
        let mut covariance = covariance;
        for r in 0..dim {
            for c in (r + 1)..dim {
                let (a, b) = (covariance[r * dim + c], covariance[c * dim + r]);
                let scale = a.abs().max(b.abs()).max(1.0);
                if (a - b).abs() > SYMMETRY_TOL * scale {
                    return Err(Error::Invariant(format!(
                        "covariance not symmetric at ({r},{c})"
                    )));
                }
                if mode == CovarianceMode::Diagonal && (a != 0.0 || b != 0.0) {
                    return Err(Error::Invariant(
                        "diagonal covariance has off-diagonal entries".into(),
                    ));
                }
                let avg = 0.5 * (a + b);
                covariance[r * dim + c] = avg;
                covariance[c * dim + r] = avg;
            }
        }

        let (log_det, whitening) = match mode {
            CovarianceMode::Diagonal => {
                let mut log_det = 0.0;
                let mut inv = Vec::with_capacity(dim);
                for d in 0..dim {
                    let v = covariance[d * dim + d];
                    if v <= 0.0 {
                        return Err(Error::Invariant(format!(
                            "variance {v} on channel {d} is not positive"
                        )));
                    }
                    log_det += v.ln();
                    inv.push(1.0 / v);
                }
                (log_det, inv)
            }
            CovarianceMode::Full => {
                let m = DMatrix::from_row_slice(dim, dim, &covariance);
                let chol = m.cholesky().ok_or_else(|| {
                    Error::Invariant("covariance is not positive definite".into())
                })?;
                let l = chol.l();
                let log_det = 2.0 * (0..dim).map(|d| l[(d, d)].ln()).sum::<f64>();
                let l_inv = l
                    .try_inverse()
                    .ok_or_else(|| Error::Invariant("singular cholesky factor".into()))?;
                let mut w = Vec::with_capacity(dim * dim);
                for r in 0..dim {
                    for c in 0..dim {
                        w.push(l_inv[(r, c)]);
                    }
                }
                (log_det, w)
            }
        };
        if !log_det.is_finite() {
            return Err(Error::Invariant("covariance determinant not finite".into()));
        }
        let log_norm = -0.5 * (dim as f64 * (2.0 * PI).ln() + log_det);
        Ok(Self {
            mean,
            covariance,
            mode,
            log_norm,
            whitening,
        })
    }

    /// Diagonal-covariance component from per-channel variances.
    pub fn diagonal(mean: Vec<f64>, variances: &[f64]) -> Result<Self> {
        let dim = mean.len();
        if variances.len() != dim {
            return Err(Error::invalid("variance count differs from mean dimension"));
        }
        let mut cov = vec![0.0; dim * dim];
        for (d, v) in variances.iter().enumerate() {
            cov[d * dim + d] = *v;
        }
        Self::new(mean, cov, CovarianceMode::Diagonal)
    }

    pub fn standard(dim: usize) -> Result<Self> {
        Self::diagonal(vec![0.0; dim], &vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Row-major `D x D` covariance.
    pub fn covariance(&self) -> &[f64] {
        &self.covariance
    }

    pub fn mode(&self) -> CovarianceMode {
        self.mode
    }

    /// Smallest eigenvalue (full) or smallest variance (diagonal).
    pub fn min_variance(&self) -> f64 {
        let dim = self.dim();
        match self.mode {
            CovarianceMode::Diagonal => (0..dim)
                .map(|d| self.covariance[d * dim + d])
                .fold(f64::INFINITY, f64::min),
            CovarianceMode::Full => {
                let m = DMatrix::from_row_slice(dim, dim, &self.covariance);
                SymmetricEigen::new(m)
                    .eigenvalues
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min)
            }
        }
    }

    /// Draw one frame.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.dim();
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        match self.mode {
            CovarianceMode::Diagonal => (0..d)
                .map(|i| self.mean[i] + self.covariance[i * d + i].sqrt() * z[i])
                .collect(),
            CovarianceMode::Full => {
                let l = DMatrix::from_row_slice(d, d, &self.covariance)
                    .cholesky()
                    .expect("validated positive definite")
                    .l();
                (0..d)
                    .map(|r| self.mean[r] + (0..=r).map(|c| l[(r, c)] * z[c]).sum::<f64>())
                    .collect()
            }
        }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let dim = self.dim();
        debug_assert_eq!(x.len(), dim);
        let quad = match self.mode {
            CovarianceMode::Diagonal => x
                .iter()
                .zip(&self.mean)
                .zip(&self.whitening)
                .map(|((xi, mi), inv)| {
                    let d = xi - mi;
                    d * d * inv
                })
                .sum::<f64>(),
            CovarianceMode::Full => {
                let mut quad = 0.0;
                for r in 0..dim {
                    let mut z = 0.0;
                    for c in 0..=r {
                        z += self.whitening[r * dim + c] * (x[c] - self.mean[c]);
                    }
                    quad += z * z;
                }
                quad
            }
        };
        self.log_norm - 0.5 * quad
    }
}

/// Clamp a symmetric matrix so that every eigenvalue (full) or diagonal
/// entry (diagonal) is at least `floor`. Returns the clamped matrix and
/// whether anything was raised.
pub fn floor_covariance(
    covariance: &[f64],
    dim: usize,
    mode: CovarianceMode,
    floor: f64,
) -> (Vec<f64>, bool) {
    match mode {
        CovarianceMode::Diagonal => {
            let mut out = vec![0.0; dim * dim];
            let mut floored = false;
            for d in 0..dim {
                let v = covariance[d * dim + d];
                // NaN also lands on the floor
                out[d * dim + d] = if v >= floor {
                    v
                } else {
                    floored = true;
                    floor
                };
            }
            (out, floored)
        }
        CovarianceMode::Full => {
            let mut m = DMatrix::from_row_slice(dim, dim, covariance);
            m = (&m + m.transpose()) * 0.5;
            let eig = SymmetricEigen::new(m.clone());
            if eig.eigenvalues.iter().all(|&v| v >= floor) {
                let mut out = Vec::with_capacity(dim * dim);
                for r in 0..dim {
                    for c in 0..dim {
                        out.push(m[(r, c)]);
                    }
                }
                return (out, false);
            }
            let clamped = eig.eigenvalues.map(|v| if v >= floor { v } else { floor });
            let v = &eig.eigenvectors;
            let rebuilt = v * DMatrix::from_diagonal(&clamped) * v.transpose();
            let mut out = Vec::with_capacity(dim * dim);
            for r in 0..dim {
                for c in 0..dim {
                    out.push(0.5 * (rebuilt[(r, c)] + rebuilt[(c, r)]));
                }
            }
            // reconstruction error can dip a hair under the floor
            for d in 0..dim {
                out[d * dim + d] += floor * 1e-9;
            }
            (out, true)
        }
    }
}

/// Weighted sum of Gaussian components, `b(o) = sum_m c_m N(o; mu_m, Sigma_m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<GaussianComponent>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(components: Vec<GaussianComponent>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if components.len() != weights.len() {
            return Err(Error::invalid("mixture weight count differs from component count"));
        }
        let dim = components[0].dim();
        if components.iter().any(|c| c.dim() != dim) {
            return Err(Error::invalid("mixture components disagree on dimension"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Invariant("mixture weight negative or non-finite".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::Normalization {
                what: "mixture weights".into(),
                sum,
            });
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            components,
            weights,
            log_weights,
        })
    }

    pub fn single(component: GaussianComponent) -> Self {
        Self {
            components: vec![component],
            weights: vec![1.0],
            log_weights: vec![0.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Per-component `ln c_m + ln N(x; mu_m, Sigma_m)`.
    pub fn component_log_terms<'a>(&'a self, x: &'a [f64]) -> impl Iterator<Item = f64> + Clone + 'a {
        self.components
            .iter()
            .zip(&self.log_weights)
            .map(move |(c, lw)| {
                if *lw == LOG_ZERO {
                    LOG_ZERO
                } else {
                    lw + c.log_density(x)
                }
            })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.components[pick_index(rng, &self.weights)].sample(rng)
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        if self.components.len() == 1 {
            return self.components[0].log_density(x);
        }
        log_sum_exp_iter(self.component_log_terms(x))
    }
}

/// Index drawn from nonnegative weights summing to about one.
pub(crate) fn pick_index<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        if u < w {
            return i;
        }
        u -= w;
        last = i;
    }
    last
}
