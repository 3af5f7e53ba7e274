//! Evaluation metrics: SMSE, MSLL, MAE for multi-output regression, and
//! historical MSE plus forecast log likelihood for covariance prediction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GprnError, Result};
use crate::prediction::gaussian_log_density;

/// Per-output moments of a reference (training) set, used by MSLL and by the
/// train-moments SMSE variant. Variances are population variances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStats {
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
}

impl TrainStats {
    /// Moments over the observed entries of each output column.
    pub fn from_observed(y: &DMatrix<f64>, mask: &DMatrix<bool>) -> Result<TrainStats> {
        let p = y.ncols();
        let mut means = Vec::with_capacity(p);
        let mut vars = Vec::with_capacity(p);
        for c in 0..p {
            let vals: Vec<f64> = (0..y.nrows()).filter(|&r| mask[(r, c)]).map(|r| y[(r, c)]).collect();
            if vals.is_empty() {
                return Err(GprnError::input(format!(
                    "train stats: output {c} has no observed entries"
                )));
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            means.push(m);
            vars.push(v);
        }
        Ok(TrainStats { means, vars })
    }
}

/// Flat metric report; absent metrics serialize as missing keys.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub msll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub historical_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forecast_loglik: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smse_per_output: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub msll_per_output: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae_per_output: Option<Vec<f64>>,
}

fn check_aligned(pred: &DMatrix<f64>, truth: &DMatrix<f64>, mask: &DMatrix<bool>) -> Result<()> {
    if pred.shape() != truth.shape() || mask.shape() != truth.shape() {
        return Err(GprnError::input(format!(
            "metric shape mismatch: pred {}x{}, truth {}x{}, mask {}x{}",
            pred.nrows(),
            pred.ncols(),
            truth.nrows(),
            truth.ncols(),
            mask.nrows(),
            mask.ncols()
        )));
    }
    Ok(())
}

fn average_present(per_output: &[Option<f64>]) -> Result<(f64, Vec<f64>)> {
    let present: Vec<f64> = per_output.iter().filter_map(|v| *v).collect();
    if present.is_empty() {
        return Err(GprnError::input("metric: no observed test entries"));
    }
    Ok((
        present.iter().sum::<f64>() / present.len() as f64,
        per_output.iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
    ))
}

/// Standardized mean squared error: the per-output MSE divided by the target
/// variance of that output, averaged across outputs. The normalizing
/// variance is the test-set population variance by default, or the stored
/// train variance when `train_stats` is supplied. Predicting the moment
/// source's mean everywhere scores exactly 1.
pub fn smse(
    pred: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    train_stats: Option<&TrainStats>,
) -> Result<(f64, Vec<f64>)> {
    check_aligned(pred, truth, mask)?;
    let p = truth.ncols();
    let mut per_output: Vec<Option<f64>> = Vec::with_capacity(p);
    for c in 0..p {
        let rows: Vec<usize> = (0..truth.nrows()).filter(|&r| mask[(r, c)]).collect();
        if rows.is_empty() {
            per_output.push(None);
            continue;
        }
        let mse = rows
            .iter()
            .map(|&r| (pred[(r, c)] - truth[(r, c)]).powi(2))
            .sum::<f64>()
            / rows.len() as f64;
        let var = match train_stats {
            Some(stats) => stats.vars[c],
            None => {
                let mean = rows.iter().map(|&r| truth[(r, c)]).sum::<f64>() / rows.len() as f64;
                rows.iter().map(|&r| (truth[(r, c)] - mean).powi(2)).sum::<f64>() / rows.len() as f64
            }
        };
        if var <= 0.0 {
            return Err(GprnError::input(format!(
                "smse: output {c} has zero target variance"
            )));
        }
        per_output.push(Some(mse / var));
    }
    average_present(&per_output)
}

/// Mean standardized log loss: the negative Gaussian log score of the
/// prediction minus that of the trivial train-moments Gaussian, averaged
/// over test points. Negative is better; the trivial predictor scores 0.
pub fn msll(
    pred_means: &DMatrix<f64>,
    pred_vars: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    train_stats: &TrainStats,
) -> Result<(f64, Vec<f64>)> {
    check_aligned(pred_means, truth, mask)?;
    if pred_vars.shape() != truth.shape() {
        return Err(GprnError::input("msll: variance shape mismatch"));
    }
    let neg_log = |y: f64, mean: f64, var: f64| -> Result<f64> {
        if var <= 0.0 {
            return Err(GprnError::input(format!(
                "msll: nonpositive predictive variance {var}"
            )));
        }
        Ok(0.5 * (2.0 * std::f64::consts::PI * var).ln() + 0.5 * (y - mean) * (y - mean) / var)
    };
    let p = truth.ncols();
    let mut per_output: Vec<Option<f64>> = Vec::with_capacity(p);
    for c in 0..p {
        let rows: Vec<usize> = (0..truth.nrows()).filter(|&r| mask[(r, c)]).collect();
        if rows.is_empty() {
            per_output.push(None);
            continue;
        }
        let mut acc = 0.0;
        for &r in &rows {
            let model = neg_log(truth[(r, c)], pred_means[(r, c)], pred_vars[(r, c)])?;
            let trivial = neg_log(truth[(r, c)], train_stats.means[c], train_stats.vars[c])?;
            acc += model - trivial;
        }
        per_output.push(Some(acc / rows.len() as f64));
    }
    average_present(&per_output)
}

/// Mean absolute error over observed entries.
pub fn mae(
    pred: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    mask: &DMatrix<bool>,
) -> Result<(f64, Vec<f64>)> {
    check_aligned(pred, truth, mask)?;
    let p = truth.ncols();
    let mut per_output: Vec<Option<f64>> = Vec::with_capacity(p);
    for c in 0..p {
        let rows: Vec<usize> = (0..truth.nrows()).filter(|&r| mask[(r, c)]).collect();
        if rows.is_empty() {
            per_output.push(None);
            continue;
        }
        let v = rows
            .iter()
            .map(|&r| (pred[(r, c)] - truth[(r, c)]).abs())
            .sum::<f64>()
            / rows.len() as f64;
        per_output.push(Some(v));
    }
    average_present(&per_output)
}

/// Mean over time of the mean squared elementwise difference between the
/// predicted covariance and the observation outer product y y'.
pub fn historical_mse(sigma_pred: &[DMatrix<f64>], ys: &[DVector<f64>]) -> Result<f64> {
    if sigma_pred.len() != ys.len() || sigma_pred.is_empty() {
        return Err(GprnError::input(
            "historical_mse: need equal, nonzero numbers of covariances and observations",
        ));
    }
    let mut total = 0.0;
    for (sigma, y) in sigma_pred.iter().zip(ys) {
        let p = y.len();
        if sigma.shape() != (p, p) {
            return Err(GprnError::input("historical_mse: covariance shape mismatch"));
        }
        let outer = y * y.transpose();
        let diff = sigma - outer;
        total += diff.iter().map(|v| v * v).sum::<f64>() / (p * p) as f64;
    }
    Ok(total / sigma_pred.len() as f64)
}

/// Sum of log N(y_t; mean_t, Sigma_t) over forecasts. The mean defaults to
/// zero, the usual convention for return series.
pub fn forecast_loglik(
    sigma_pred: &[DMatrix<f64>],
    ys: &[DVector<f64>],
    means: Option<&[DVector<f64>]>,
) -> Result<f64> {
    if sigma_pred.len() != ys.len() || sigma_pred.is_empty() {
        return Err(GprnError::input(
            "forecast_loglik: need equal, nonzero numbers of covariances and observations",
        ));
    }
    if let Some(m) = means {
        if m.len() != ys.len() {
            return Err(GprnError::input("forecast_loglik: means length mismatch"));
        }
    }
    let mut total = 0.0;
    for (t, (sigma, y)) in sigma_pred.iter().zip(ys).enumerate() {
        let mean = match means {
            Some(m) => m[t].clone(),
            None => DVector::zeros(y.len()),
        };
        total += gaussian_log_density(&mean, sigma, y)?;
    }
    Ok(total)
}
