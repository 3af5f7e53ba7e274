//! The predictive-distribution type shared by both inference backends, plus
//! signal/noise covariance splitting and correlation fields.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GprnError, Result};
use crate::linalg::safe_cholesky;

/// Whether a prediction is a single Gaussian or a uniform mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictiveKind {
    GaussianMoments,
    GaussianMixture,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Predictive distribution over a p-dimensional output. For mixtures, the
/// stored mean and covariance are the exact mixture moments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub kind: PredictiveKind,
    pub components: Option<Vec<GaussianComponent>>,
}

impl PredictiveDistribution {
    pub fn from_moments(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != mean.len() || covariance.ncols() != mean.len() {
            return Err(GprnError::input("covariance shape does not match mean"));
        }
        Ok(PredictiveDistribution {
            mean,
            covariance: clamp_psd(&covariance),
            kind: PredictiveKind::GaussianMoments,
            components: None,
        })
    }

    /// Equal-weight Gaussian mixture; moments follow the law of total
    /// covariance: cov = avg(C_i) + avg((m_i - m)(m_i - m)').
    pub fn from_mixture(components: Vec<GaussianComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(GprnError::input("mixture needs at least one component"));
        }
        let p = components[0].mean.len();
        if components
            .iter()
            .any(|c| c.mean.len() != p || c.covariance.shape() != (p, p))
        {
            return Err(GprnError::input("mixture components disagree in dimension"));
        }
        let j = components.len() as f64;
        let mut mean = DVector::zeros(p);
        for c in &components {
            mean += &c.mean;
        }
        mean /= j;
        let mut cov = DMatrix::zeros(p, p);
        for c in &components {
            let dm = &c.mean - &mean;
            cov += &c.covariance;
            cov += &dm * dm.transpose();
        }
        cov /= j;
        Ok(PredictiveDistribution {
            mean,
            covariance: clamp_psd(&cov),
            kind: PredictiveKind::GaussianMixture,
            components: Some(components),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log predictive density at y. Mixtures use the equal-weight
    /// log-mean-exp of component densities.
    pub fn log_density(&self, y: &DVector<f64>) -> Result<f64> {
        if y.len() != self.dim() {
            return Err(GprnError::input(format!(
                "log_density: point has dimension {}, prediction has {}",
                y.len(),
                self.dim()
            )));
        }
        match (&self.kind, &self.components) {
            (PredictiveKind::GaussianMixture, Some(components)) => {
                let logs: Vec<f64> = components
                    .iter()
                    .map(|c| gaussian_log_density(&c.mean, &c.covariance, y))
                    .collect::<Result<Vec<_>>>()?;
                Ok(log_mean_exp(&logs))
            }
            _ => gaussian_log_density(&self.mean, &self.covariance, y),
        }
    }
}

/// Log density of N(mean, cov) at y; errors when cov is not positive
/// semi-definite.
pub fn gaussian_log_density(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    let chol = safe_cholesky(cov, "gaussian density covariance")?;
    let resid = y - mean;
    let p = y.len() as f64;
    Ok(-0.5 * chol.quad_form_inv(&resid)
        - 0.5 * chol.logdet()
        - 0.5 * p * (2.0 * std::f64::consts::PI).ln())
}

fn log_mean_exp(logs: &[f64]) -> f64 {
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = logs.iter().map(|l| (l - m).exp()).sum();
    m + (s / logs.len() as f64).ln()
}

/// Clamp a symmetric matrix to the PSD cone by flooring eigenvalues at zero.
pub fn clamp_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return sym;
    }
    let floored = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0)),
    );
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
    (&rebuilt + rebuilt.transpose()) * 0.5
}

/// Split a total predictive covariance into (signal, noise). The noise part
/// comes from the backend's noise-covariance evaluation; the signal part is
/// the remainder, clamped PSD.
pub fn signal_noise_split(
    total: &DMatrix<f64>,
    noise: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if total.shape() != noise.shape() {
        return Err(GprnError::input("signal/noise split: shape mismatch"));
    }
    let signal = clamp_psd(&(total - noise));
    Ok((signal, noise.clone()))
}

/// One entry of a correlation field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    /// Set when a zero variance forced the correlation to be reported as 0.
    pub degenerate: bool,
}

/// Correlation rho_ij = c_ij / sqrt(c_ii c_jj) for each covariance in a
/// grid of per-point covariances.
pub fn correlation_field(covs: &[DMatrix<f64>], i: usize, j: usize) -> Result<Vec<Correlation>> {
    covs.iter()
        .map(|c| {
            if i >= c.nrows() || j >= c.nrows() {
                return Err(GprnError::input(format!(
                    "correlation pair ({i}, {j}) out of range for p = {}",
                    c.nrows()
                )));
            }
            let denom = c[(i, i)] * c[(j, j)];
            if denom <= 0.0 {
                Ok(Correlation {
                    value: 0.0,
                    degenerate: true,
                })
            } else {
                Ok(Correlation {
                    value: (c[(i, j)] / denom.sqrt()).clamp(-1.0, 1.0),
                    degenerate: false,
                })
            }
        })
        .collect()
}
