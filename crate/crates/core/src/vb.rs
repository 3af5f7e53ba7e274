//! Mean-field variational inference: coordinate-ascent E-step over the
//! factorized posterior, gradient M-step for the kernel length-scales, the
//! analytic predictive moments, and node-count selection via the bound.
//!
//! The posterior factorizes over the node vectors f_j, the weight vectors
//! W_ij, the per-site noisy node values fhat_nj, and inverse-Gamma factors
//! for sigma_y^2, each sigma_fj^2, and each ARD signal variance a_j. The
//! scalar sites w_nij and f'_nj are deterministic copies of vector
//! coordinates, and the product/sum sites t_nij = w_nij fhat_nj,
//! s_in = sum_j t_nij carry the standard moment rules
//! E[t] = E[w] E[fhat], E[t^2] = E[w^2] E[fhat^2].
//!
//! Every update is an exact coordinate maximization of the tracked lower
//! bound, so the objective is non-decreasing across sweeps up to floating
//! point. Sites at rows with no observed output are pruned, which keeps the
//! node and weight posteriors at their priors when all data are masked.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::data::Dataset;
use crate::error::{GprnError, Result};
use crate::linalg::{safe_cholesky, CholFactor};
use crate::model::{Hyperparams, IgPrior, NetworkShape};
use crate::prediction::{clamp_psd, PredictiveDistribution};
use crate::rng::stream_rng;

const LN_2PI: f64 = 1.837877066409345; // ln(2 pi)

/// Relative nugget added to the VB Gram matrices. Smooth kernels produce
/// numerically singular Grams whose inverses amplify rounding error past the
/// objective's monotonicity slack; the nugget caps the condition number.
const VB_NUGGET: f64 = 1e-5;

/// Kernel Gram with the stabilizing nugget on the diagonal.
pub(crate) fn vb_gram(kernel: &crate::kernels::KernelSpec, x: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let mut k = kernel.gram(x)?;
    let floor = VB_NUGGET * k.diagonal().mean();
    for i in 0..k.nrows() {
        k[(i, i)] += floor;
    }
    Ok(k)
}

/// Inverse-Gamma posterior factor with shape/rate parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IgPosterior {
    pub shape: f64,
    pub rate: f64,
}

impl IgPosterior {
    pub fn from_prior(prior: &IgPrior) -> Self {
        IgPosterior {
            shape: prior.shape,
            rate: prior.rate,
        }
    }

    /// E[1/x] = shape / rate.
    pub fn mean_inv(&self) -> f64 {
        self.shape / self.rate
    }

    /// E[x] = rate / (shape - 1); callers only use this after updates have
    /// pushed the shape above 1.
    pub fn mean(&self) -> f64 {
        debug_assert!(self.shape > 1.0, "IG mean needs shape > 1");
        self.rate / (self.shape - 1.0)
    }

    /// E[ln x] = ln(rate) - digamma(shape).
    pub fn mean_log(&self) -> f64 {
        self.rate.ln() - digamma(self.shape)
    }

    pub fn entropy(&self) -> f64 {
        self.shape + self.rate.ln() + ln_gamma(self.shape) - (1.0 + self.shape) * digamma(self.shape)
    }

    fn is_valid(&self) -> bool {
        self.shape > 0.0 && self.rate > 0.0 && self.shape.is_finite() && self.rate.is_finite()
    }
}

/// The factorized posterior state.
///
/// Weight vectors are indexed by column i*q + j as in `NetworkParams`; the
/// per-site scalar moments for the deterministic copies and the product/sum
/// sites are exposed through accessor methods.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariationalPosterior {
    pub f_mean: Vec<DVector<f64>>,
    pub f_cov: Vec<DMatrix<f64>>,
    /// log det of each f_cov, maintained by the updates.
    pub f_cov_logdet: Vec<f64>,
    pub fhat_mean: DMatrix<f64>,
    pub fhat_var: DMatrix<f64>,
    pub w_mean: DMatrix<f64>,
    pub w_cov: Vec<DMatrix<f64>>,
    /// log det of each w_cov, maintained by the updates.
    pub w_cov_logdet: Vec<f64>,
    pub sigma_y2: IgPosterior,
    pub sigma_f2: Vec<IgPosterior>,
    pub ard: Vec<IgPosterior>,
    pub p: usize,
    pub q: usize,
}

impl VariationalPosterior {
    /// Posterior initialized at the priors with zero means.
    pub fn at_prior(shape: &NetworkShape, hyp: &Hyperparams, kf: &DMatrix<f64>, kw: &DMatrix<f64>) -> Self {
        let (n, p, q) = (shape.n, shape.p, shape.q);
        let kf_logdet = safe_cholesky(kf, "node kernel gram").map(|c| c.logdet()).unwrap_or(f64::NAN);
        let kw_logdet = safe_cholesky(kw, "weight kernel gram").map(|c| c.logdet()).unwrap_or(f64::NAN);
        VariationalPosterior {
            f_mean: vec![DVector::zeros(n); q],
            f_cov: vec![kf.clone(); q],
            f_cov_logdet: vec![kf_logdet; q],
            fhat_mean: DMatrix::zeros(n, q),
            fhat_var: DMatrix::from_element(n, q, 1.0),
            w_mean: DMatrix::zeros(n, p * q),
            w_cov: vec![kw.clone(); p * q],
            w_cov_logdet: vec![kw_logdet; p * q],
            sigma_y2: IgPosterior::from_prior(&hyp.sigma_y2_prior),
            sigma_f2: vec![IgPosterior::from_prior(&hyp.sigma_f2_prior); q],
            ard: vec![IgPosterior::from_prior(&hyp.ard_prior); q],
            p,
            q,
        }
    }

    pub fn n(&self) -> usize {
        self.fhat_mean.nrows()
    }

    /// Moments of the weight copy w_nij: (mean, second moment).
    pub fn w_scalar_moments(&self, n: usize, i: usize, j: usize) -> (f64, f64) {
        let c = i * self.q + j;
        let m = self.w_mean[(n, c)];
        (m, m * m + self.w_cov[c][(n, n)])
    }

    /// Moments of the node copy f'_nj: (mean, variance).
    pub fn fprime_moments(&self, n: usize, j: usize) -> (f64, f64) {
        (self.f_mean[j][n], self.f_cov[j][(n, n)])
    }

    /// Moments of the noisy node site fhat_nj: (mean, second moment).
    pub fn fhat_moments(&self, n: usize, j: usize) -> (f64, f64) {
        let m = self.fhat_mean[(n, j)];
        (m, m * m + self.fhat_var[(n, j)])
    }

    /// Moments of the product site t_nij = w_nij fhat_nj: (mean, variance).
    pub fn t_moments(&self, n: usize, i: usize, j: usize) -> (f64, f64) {
        let (wm, w2) = self.w_scalar_moments(n, i, j);
        let (fm, f2) = self.fhat_moments(n, j);
        let mean = wm * fm;
        (mean, w2 * f2 - mean * mean)
    }

    /// Moments of the sum site s_in = sum_j t_nij: (mean, variance).
    pub fn s_moments(&self, n: usize, i: usize) -> (f64, f64) {
        let mut mean = 0.0;
        let mut var = 0.0;
        for j in 0..self.q {
            let (tm, tv) = self.t_moments(n, i, j);
            mean += tm;
            var += tv;
        }
        (mean, var)
    }

    /// Posterior-mean signal E[W] E[f] at the training points, N x p.
    pub fn training_signal_mean(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, self.p, |r, i| {
            (0..self.q)
                .map(|j| self.w_mean[(r, i * self.q + j)] * self.f_mean[j][r])
                .sum()
        })
    }

    fn check_finite(&self) -> Result<()> {
        let bad = |name: &str| {
            Err(GprnError::Numerical {
                context: "variational E-step".to_string(),
                detail: format!("non-finite moment in factor {name}"),
            })
        };
        for (j, m) in self.f_mean.iter().enumerate() {
            if m.iter().any(|v| !v.is_finite()) {
                return bad(&format!("q(f_{j}) mean"));
            }
        }
        for (j, c) in self.f_cov.iter().enumerate() {
            if c.iter().any(|v| !v.is_finite()) {
                return bad(&format!("q(f_{j}) covariance"));
            }
        }
        if self.fhat_mean.iter().any(|v| !v.is_finite())
            || self.fhat_var.iter().any(|v| !v.is_finite() || *v < 0.0)
        {
            return bad("q(fhat)");
        }
        if self.w_mean.iter().any(|v| !v.is_finite()) {
            return bad("q(W) mean");
        }
        if !self.sigma_y2.is_valid() {
            return bad("q(sigma_y^2)");
        }
        if self.sigma_f2.iter().any(|g| !g.is_valid()) {
            return bad("q(sigma_f^2)");
        }
        if self.ard.iter().any(|g| !g.is_valid()) {
            return bad("q(a)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VbConfig {
    pub max_em_iters: usize,
    pub estep_inner_iters: usize,
    pub objective_tol: f64,
    pub mstep_max_linesearch: usize,
    pub n_restarts: usize,
    pub seed: u64,
}

impl Default for VbConfig {
    fn default() -> Self {
        VbConfig {
            max_em_iters: 50,
            estep_inner_iters: 5,
            objective_tol: 1e-6,
            mstep_max_linesearch: 20,
            n_restarts: 5,
            seed: 0,
        }
    }
}

impl VbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_em_iters == 0 || self.estep_inner_iters == 0 || self.n_restarts == 0 {
            return Err(GprnError::input("VB iteration counts must be positive"));
        }
        if !(self.objective_tol > 0.0) {
            return Err(GprnError::input("objective tolerance must be positive"));
        }
        Ok(())
    }
}

/// Cached Gram matrices, factors, and mask summaries for one setting of the
/// hyperparameters.
pub struct VbWorkspace {
    /// Node kernel Gram, including any stabilizing jitter from the factor.
    pub kf: DMatrix<f64>,
    pub kf_chol: CholFactor,
    /// Weight kernel Gram, including any stabilizing jitter.
    pub kw: DMatrix<f64>,
    pub kw_chol: CholFactor,
    /// Rows with at least one observed output; fhat sites exist only there.
    pub row_active: Vec<bool>,
    pub n_active: usize,
    pub n_observed: usize,
}

impl VbWorkspace {
    pub fn build(hyp: &Hyperparams, x: &[Vec<f64>], mask: &DMatrix<bool>) -> Result<Self> {
        let mut kf = vb_gram(&hyp.node_kernel, x)?;
        let kf_chol = safe_cholesky(&kf, "node kernel gram")?;
        let mut kw = vb_gram(&hyp.weight_kernel, x)?;
        let kw_chol = safe_cholesky(&kw, "weight kernel gram")?;
        // Work with the exact matrices that were factored.
        for i in 0..kf.nrows() {
            kf[(i, i)] += kf_chol.jitter_used();
            kw[(i, i)] += kw_chol.jitter_used();
        }
        let row_active: Vec<bool> = (0..mask.nrows())
            .map(|r| (0..mask.ncols()).any(|c| mask[(r, c)]))
            .collect();
        let n_active = row_active.iter().filter(|a| **a).count();
        let n_observed = mask.iter().filter(|m| **m).count();
        Ok(VbWorkspace {
            kf,
            kf_chol,
            kw,
            kw_chol,
            row_active,
            n_active,
            n_observed,
        })
    }
}

/// The likelihood message to an ARD signal variance: an inverse-Gamma with
/// shape N/2 - 1 and rate (1/2) E[f' K^{-1} f] under the current q(f_j).
/// The shape is nonpositive for N <= 2; combining with the IG prior gives
/// the posterior shape alpha_a + N/2, which is always positive.
pub fn ard_message(
    f_mean: &DVector<f64>,
    f_cov: &DMatrix<f64>,
    node_gram_unit: &DMatrix<f64>,
) -> Result<(f64, f64)> {
    let chol = safe_cholesky(node_gram_unit, "node kernel gram")?;
    Ok(ard_message_with(f_mean, f_cov, &chol))
}

fn ard_message_with(f_mean: &DVector<f64>, f_cov: &DMatrix<f64>, chol: &CholFactor) -> (f64, f64) {
    let n = f_mean.len() as f64;
    let quad = chol.quad_form_inv(f_mean);
    let trace = chol.trace_solve(f_cov);
    (0.5 * n - 1.0, 0.5 * (quad + trace))
}


/// Exact coordinate update of a Gaussian vector factor with prior N(0, P)
/// and a diagonal Gaussian likelihood with precisions d and linear term h:
/// the optimum is cov = (P^{-1} + D)^{-1}, mean = cov h. Computed in
/// covariance form, cov = P - P S (I + S P S)^{-1} S P with S = sqrt(D),
/// whose inner matrix is well conditioned regardless of how smooth the
/// kernel is. Returns (mean, cov, log det cov).
fn gaussian_site_update(
    prior_cov: &DMatrix<f64>,
    prior_logdet: f64,
    d: &DVector<f64>,
    h: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let n = d.len();
    let s = d.map(|v| v.max(0.0).sqrt());
    let mut b = DMatrix::from_fn(n, n, |i, j| s[i] * prior_cov[(i, j)] * s[j]);
    for i in 0..n {
        b[(i, i)] += 1.0;
    }
    let b_chol = safe_cholesky(&b, "site update inner matrix")?;
    let ps = DMatrix::from_fn(n, n, |i, j| prior_cov[(i, j)] * s[j]);
    let binv_sp = b_chol.solve_mat(&ps.transpose());
    let cov_raw = prior_cov - &ps * &binv_sp;
    let cov = (&cov_raw + cov_raw.transpose()) * 0.5;
    let logdet = prior_logdet - b_chol.logdet();
    let mu = &cov * h;
    Ok((mu, cov, logdet))
}

/// One full coordinate sweep in the order
/// s, t, (w, fhat), f', f_j, W_ij, sigma_fj^2, sigma_y^2, a_j.
/// The s/t/w/f' stages are moment refreshes of the derived sites; the
/// remaining stages are exact conditional updates.
pub fn estep(
    posterior: &mut VariationalPosterior,
    dataset: &Dataset,
    hyp: &Hyperparams,
    ws: &VbWorkspace,
) -> Result<()> {
    estep_staged(posterior, dataset, hyp, ws, |_, _| ())
}

/// [`estep`] with a callback invoked after each update stage; used by tests
/// to localize objective changes.
#[doc(hidden)]
pub fn estep_staged(
    posterior: &mut VariationalPosterior,
    dataset: &Dataset,
    hyp: &Hyperparams,
    ws: &VbWorkspace,
    mut observer: impl FnMut(&str, &VariationalPosterior),
) -> Result<()> {
    let n = posterior.n();
    let (p, q) = (posterior.p, posterior.q);
    let y = &dataset.y;
    let mask = &dataset.mask;
    let rho_y = posterior.sigma_y2.mean_inv();

    // fhat sites, sequentially over nodes with fresh residuals.
    for j in 0..q {
        let inv_sf = posterior.sigma_f2[j].mean_inv();
        for r in 0..n {
            if !ws.row_active[r] {
                posterior.fhat_mean[(r, j)] = posterior.f_mean[j][r];
                posterior.fhat_var[(r, j)] = 0.0;
                continue;
            }
            let mut prec = inv_sf;
            let mut lin = inv_sf * posterior.f_mean[j][r];
            for i in 0..p {
                if !mask[(r, i)] {
                    continue;
                }
                let (wm, w2) = posterior.w_scalar_moments(r, i, j);
                let mut resid = y[(r, i)];
                for k in 0..q {
                    if k != j {
                        resid -= posterior.w_mean[(r, i * q + k)] * posterior.fhat_mean[(r, k)];
                    }
                }
                prec += rho_y * w2;
                lin += rho_y * wm * resid;
            }
            posterior.fhat_var[(r, j)] = 1.0 / prec;
            posterior.fhat_mean[(r, j)] = lin / prec;
        }
        observer("fhat", posterior);
    }

    // Node vectors.
    for j in 0..q {
        let a_scale = 1.0 / posterior.ard[j].mean_inv();
        let inv_sf = posterior.sigma_f2[j].mean_inv();
        let prior_cov = &ws.kf * a_scale;
        let prior_logdet = n as f64 * a_scale.ln() + ws.kf_chol.logdet();
        let mut d = DVector::zeros(n);
        let mut h = DVector::zeros(n);
        for r in 0..n {
            if ws.row_active[r] {
                d[r] = inv_sf;
                h[r] = inv_sf * posterior.fhat_mean[(r, j)];
            }
        }
        let (mu, cov, logdet) = gaussian_site_update(&prior_cov, prior_logdet, &d, &h)?;
        posterior.f_mean[j] = mu;
        posterior.f_cov[j] = cov;
        posterior.f_cov_logdet[j] = logdet;
        observer("f", posterior);
    }

    // Weight vectors: covariance shared across outputs with the same
    // observation pattern, one inner factorization per pattern per node.
    for j in 0..q {
        let fhat2: Vec<f64> = (0..n).map(|r| posterior.fhat_moments(r, j).1).collect();
        let mut cov_by_pattern: HashMap<Vec<bool>, (DMatrix<f64>, f64)> = HashMap::new();
        for i in 0..p {
            let pattern: Vec<bool> = (0..n).map(|r| mask[(r, i)]).collect();
            if !cov_by_pattern.contains_key(&pattern) {
                let mut d = DVector::zeros(n);
                for r in 0..n {
                    if pattern[r] {
                        d[r] = rho_y * fhat2[r];
                    }
                }
                let (_, cov, logdet) =
                    gaussian_site_update(&ws.kw, ws.kw_chol.logdet(), &d, &DVector::zeros(n))?;
                cov_by_pattern.insert(pattern.clone(), (cov, logdet));
            }
            let (cov, logdet) = &cov_by_pattern[&pattern];
            let mut h = DVector::zeros(n);
            for r in 0..n {
                if !mask[(r, i)] {
                    continue;
                }
                let mut resid = y[(r, i)];
                for k in 0..q {
                    if k != j {
                        resid -= posterior.w_mean[(r, i * q + k)] * posterior.fhat_mean[(r, k)];
                    }
                }
                h[r] = rho_y * posterior.fhat_mean[(r, j)] * resid;
            }
            let mu = cov * &h;
            posterior.w_mean.column_mut(i * q + j).copy_from(&mu);
            posterior.w_cov[i * q + j] = cov.clone();
            posterior.w_cov_logdet[i * q + j] = *logdet;
        }
        observer("w", posterior);
    }

    // Node noise variances.
    for j in 0..q {
        let mut rate = hyp.sigma_f2_prior.rate;
        for r in 0..n {
            if !ws.row_active[r] {
                continue;
            }
            let (fm, fv) = posterior.fprime_moments(r, j);
            let diff = posterior.fhat_mean[(r, j)] - fm;
            rate += 0.5 * (diff * diff + posterior.fhat_var[(r, j)] + fv);
        }
        posterior.sigma_f2[j] = IgPosterior {
            shape: hyp.sigma_f2_prior.shape + 0.5 * ws.n_active as f64,
            rate,
        };
        observer("sigma_f2", posterior);
    }

    // Observation noise variance.
    {
        let mut rate = hyp.sigma_y2_prior.rate;
        for r in 0..n {
            for i in 0..p {
                if !mask[(r, i)] {
                    continue;
                }
                let (sm, sv) = posterior.s_moments(r, i);
                let diff = y[(r, i)] - sm;
                rate += 0.5 * (diff * diff + sv);
            }
        }
        posterior.sigma_y2 = IgPosterior {
            shape: hyp.sigma_y2_prior.shape + 0.5 * ws.n_observed as f64,
            rate,
        };
        observer("sigma_y2", posterior);
    }

    // ARD signal variances: prior combined with the likelihood message.
    for j in 0..q {
        let (_, msg_rate) = ard_message_with(&posterior.f_mean[j], &posterior.f_cov[j], &ws.kf_chol);
        posterior.ard[j] = IgPosterior {
            shape: hyp.ard_prior.shape + 0.5 * n as f64,
            rate: hyp.ard_prior.rate + msg_rate,
        };
        observer("ard", posterior);
    }

    posterior.check_finite()
}

fn ig_cross_entropy_terms(post: &IgPosterior, prior: &IgPrior) -> f64 {
    let expected_log_prior = prior.shape * prior.rate.ln() - ln_gamma(prior.shape)
        - (prior.shape + 1.0) * post.mean_log()
        - prior.rate * post.mean_inv();
    expected_log_prior + post.entropy()
}

/// The tracked variational objective: expected log joint plus entropy over
/// every active factor.
pub fn elbo(
    posterior: &VariationalPosterior,
    dataset: &Dataset,
    hyp: &Hyperparams,
    ws: &VbWorkspace,
) -> Result<f64> {
    let n = posterior.n();
    let (p, q) = (posterior.p, posterior.q);
    let nf = n as f64;
    let mut total = 0.0;

    // Node priors and entropies.
    for j in 0..q {
        let quad = ws.kf_chol.quad_form_inv(&posterior.f_mean[j])
            + ws.kf_chol.trace_solve(&posterior.f_cov[j]);
        total += -0.5 * nf * LN_2PI
            - 0.5 * nf * posterior.ard[j].mean_log()
            - 0.5 * ws.kf_chol.logdet()
            - 0.5 * posterior.ard[j].mean_inv() * quad;
        total += 0.5 * posterior.f_cov_logdet[j] + 0.5 * nf * (1.0 + LN_2PI);
    }

    // Weight priors and entropies.
    for c in 0..p * q {
        let mu = posterior.w_mean.column(c).into_owned();
        let quad = ws.kw_chol.quad_form_inv(&mu) + ws.kw_chol.trace_solve(&posterior.w_cov[c]);
        total += -0.5 * nf * LN_2PI - 0.5 * ws.kw_chol.logdet() - 0.5 * quad;
        total += 0.5 * posterior.w_cov_logdet[c] + 0.5 * nf * (1.0 + LN_2PI);
    }

    // fhat sites.
    for j in 0..q {
        let ig = &posterior.sigma_f2[j];
        for r in 0..n {
            if !ws.row_active[r] {
                continue;
            }
            let (fm, fv) = posterior.fprime_moments(r, j);
            let diff = posterior.fhat_mean[(r, j)] - fm;
            let e = diff * diff + posterior.fhat_var[(r, j)] + fv;
            total += -0.5 * LN_2PI - 0.5 * ig.mean_log() - 0.5 * ig.mean_inv() * e;
            total += 0.5 * (1.0 + LN_2PI) + 0.5 * posterior.fhat_var[(r, j)].ln();
        }
    }

    // Observation sites.
    let rho_y = posterior.sigma_y2.mean_inv();
    for r in 0..n {
        for i in 0..p {
            if !dataset.mask[(r, i)] {
                continue;
            }
            let (sm, sv) = posterior.s_moments(r, i);
            let diff = dataset.y[(r, i)] - sm;
            total += -0.5 * LN_2PI - 0.5 * posterior.sigma_y2.mean_log()
                - 0.5 * rho_y * (diff * diff + sv);
        }
    }

    // Inverse-Gamma priors and entropies.
    total += ig_cross_entropy_terms(&posterior.sigma_y2, &hyp.sigma_y2_prior);
    for j in 0..q {
        total += ig_cross_entropy_terms(&posterior.sigma_f2[j], &hyp.sigma_f2_prior);
        total += ig_cross_entropy_terms(&posterior.ard[j], &hyp.ard_prior);
    }

    if !total.is_finite() {
        return Err(GprnError::Numerical {
            context: "variational objective".to_string(),
            detail: format!("objective evaluated to {total}"),
        });
    }
    Ok(total)
}

/// Expected log of a zero-mean Gaussian prior term, up to the additive
/// piece that does not depend on the kernel: for moments (mu, Sigma) and
/// inverse-scale expectation a_inv,
/// -N/2 ln 2pi - 1/2 ln|K| - a_inv/2 (mu' K^{-1} mu + tr(K^{-1} Sigma)).
pub fn gp_prior_bound(
    kernel: &crate::kernels::KernelSpec,
    x: &[Vec<f64>],
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    a_inv: f64,
) -> Result<f64> {
    let gram = vb_gram(kernel, x)?;
    let chol = safe_cholesky(&gram, "prior gram")?;
    let quad = chol.quad_form_inv(mean) + chol.trace_solve(cov);
    let n = mean.len() as f64;
    Ok(-0.5 * n * LN_2PI - 0.5 * chol.logdet() - 0.5 * a_inv * quad)
}

/// Analytic gradient of [`gp_prior_bound`] with respect to the log
/// length-scale: -1/2 tr(K^{-1} K') + a_inv/2 (mu,Sigma quadratic through
/// K^{-1} K' K^{-1}); the second term enters with a plus sign because it
/// differentiates the inverse.
pub fn gp_prior_bound_grad(
    kernel: &crate::kernels::KernelSpec,
    x: &[Vec<f64>],
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    a_inv: f64,
) -> Result<f64> {
    let gram = vb_gram(kernel, x)?;
    let chol = safe_cholesky(&gram, "prior gram")?;
    let kprime = kernel.gram_grad_log_length_scale(x)?;
    Ok(gp_prior_grad_with(&chol, &kprime, mean, cov, a_inv))
}

fn gp_prior_grad_with(
    chol: &CholFactor,
    kprime: &DMatrix<f64>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    a_inv: f64,
) -> f64 {
    let alpha = chol.solve(mean); // K^{-1} mu
    let data_term = alpha.dot(&(kprime * &alpha));
    let kinv_kprime = chol.solve_mat(kprime);
    let trace_term = -0.5 * kinv_kprime.trace();
    let kinv_cov = chol.solve_mat(cov);
    let cov_term = (&kinv_kprime * &kinv_cov).trace();
    trace_term + 0.5 * a_inv * (data_term + cov_term)
}

/// M-step: maximize the kernel-dependent bound terms over the log
/// length-scales of the node and weight kernels, by gradient ascent with a
/// backtracking line search. Only improving steps are accepted; when the
/// line search is exhausted the previous value is kept and a warning is
/// logged.
pub fn mstep(
    posterior: &VariationalPosterior,
    hyp: &Hyperparams,
    x: &[Vec<f64>],
    config: &VbConfig,
) -> Result<Hyperparams> {
    let mut out = hyp.clone();

    let node_moments: Vec<(&DVector<f64>, &DMatrix<f64>, f64)> = (0..posterior.q)
        .map(|j| {
            (
                &posterior.f_mean[j],
                &posterior.f_cov[j],
                posterior.ard[j].mean_inv(),
            )
        })
        .collect();
    out.node_kernel = optimize_length_scale(&out.node_kernel, x, &node_moments, config, "node")?;

    let w_cols: Vec<DVector<f64>> = (0..posterior.p * posterior.q)
        .map(|c| posterior.w_mean.column(c).into_owned())
        .collect();
    let weight_moments: Vec<(&DVector<f64>, &DMatrix<f64>, f64)> = w_cols
        .iter()
        .enumerate()
        .map(|(c, mu)| (mu, &posterior.w_cov[c], 1.0))
        .collect();
    out.weight_kernel =
        optimize_length_scale(&out.weight_kernel, x, &weight_moments, config, "weight")?;
    Ok(out)
}

fn optimize_length_scale(
    kernel: &crate::kernels::KernelSpec,
    x: &[Vec<f64>],
    moments: &[(&DVector<f64>, &DMatrix<f64>, f64)],
    config: &VbConfig,
    label: &str,
) -> Result<crate::kernels::KernelSpec> {
    let objective = |theta: f64| -> Result<f64> {
        let k = kernel.with_length_scale(theta.exp())?;
        let gram = vb_gram(&k, x)?;
        let chol = safe_cholesky(&gram, "prior gram")?;
        let mut total = 0.0;
        for (mean, cov, a_inv) in moments {
            total += -0.5 * chol.logdet()
                - 0.5 * a_inv * (chol.quad_form_inv(mean) + chol.trace_solve(cov));
        }
        Ok(total)
    };
    let gradient = |theta: f64| -> Result<f64> {
        let k = kernel.with_length_scale(theta.exp())?;
        let gram = vb_gram(&k, x)?;
        let chol = safe_cholesky(&gram, "prior gram")?;
        let kprime = k.gram_grad_log_length_scale(x)?;
        let mut total = 0.0;
        for (mean, cov, a_inv) in moments {
            total += gp_prior_grad_with(&chol, &kprime, mean, cov, *a_inv);
        }
        Ok(total)
    };

    let mut theta = kernel.length_scale.ln();
    let mut obj = objective(theta)?;
    const MAX_GRAD_STEPS: usize = 25;
    const THETA_BOUND: f64 = 13.8; // keeps the length-scale within ~1e±6
    for _ in 0..MAX_GRAD_STEPS {
        let g = gradient(theta)?;
        if g.abs() < 1e-10 * (1.0 + obj.abs()) {
            break;
        }
        let mut step = 0.5;
        let mut accepted = false;
        for _ in 0..config.mstep_max_linesearch {
            let delta = (step * g).clamp(-0.5, 0.5);
            let cand = (theta + delta).clamp(-THETA_BOUND, THETA_BOUND);
            if cand == theta {
                break;
            }
            if let Ok(cand_obj) = objective(cand) {
                if cand_obj > obj {
                    theta = cand;
                    obj = cand_obj;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            log::warn!("{label} kernel line search exhausted; keeping length-scale {}", theta.exp());
            break;
        }
    }
    kernel.with_length_scale(theta.exp())
}

/// A fitted variational model: the posterior, the (possibly updated)
/// hyperparameters, the training inputs, and the objective trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VbModel {
    pub posterior: VariationalPosterior,
    pub hyp: Hyperparams,
    pub x_train: Vec<Vec<f64>>,
    pub objective_trace: Vec<f64>,
}

/// Variational EM: alternating E-step sweeps and M-step length-scale moves,
/// best of `n_restarts` by the final objective. Deterministic given the
/// seed; restarts use independent sub-streams and may run in parallel.
pub fn fit_vb(
    dataset: &Dataset,
    shape: &NetworkShape,
    config: &VbConfig,
    init_hyp: &Hyperparams,
) -> Result<VbModel> {
    config.validate()?;
    init_hyp.validate(shape.q)?;
    if dataset.n() != shape.n || dataset.p() != shape.p || dataset.d() != shape.d {
        return Err(GprnError::input(format!(
            "dataset is {}x{} in {}-d, shape wants N={}, p={}, d={}",
            dataset.n(),
            dataset.p(),
            dataset.d(),
            shape.n,
            shape.p,
            shape.d
        )));
    }
    if shape.n < 3 {
        return Err(GprnError::input(
            "variational fit needs N >= 3 for the ARD updates",
        ));
    }
    let results: Vec<Result<VbModel>> = (0..config.n_restarts)
        .into_par_iter()
        .map(|r| fit_single_restart(dataset, shape, config, init_hyp, r as u64))
        .collect();
    let mut best: Option<VbModel> = None;
    let mut last_err = None;
    for res in results {
        match res {
            Ok(model) => {
                let score = *model.objective_trace.last().unwrap_or(&f64::NEG_INFINITY);
                let better = match &best {
                    None => true,
                    Some(b) => score > *b.objective_trace.last().unwrap_or(&f64::NEG_INFINITY),
                };
                if better {
                    best = Some(model);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| {
        GprnError::FitFailure(format!(
            "all {} restarts failed; last error: {}",
            config.n_restarts,
            last_err.map(|e| e.to_string()).unwrap_or_default()
        ))
    })
}

/// One restart with an explicit sub-stream index; exposed so restart
/// semantics stay testable.
pub fn fit_single_restart(
    dataset: &Dataset,
    shape: &NetworkShape,
    config: &VbConfig,
    init_hyp: &Hyperparams,
    restart: u64,
) -> Result<VbModel> {
    let mut rng = stream_rng(config.seed, restart);
    let mut hyp = init_hyp.clone();
    let mut ws = VbWorkspace::build(&hyp, &dataset.x, &dataset.mask)?;
    let mut posterior = VariationalPosterior::at_prior(shape, &hyp, &ws.kf, &ws.kw);
    for j in 0..shape.q {
        for r in 0..shape.n {
            posterior.f_mean[j][r] = 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal);
            posterior.fhat_mean[(r, j)] = posterior.f_mean[j][r];
        }
    }
    for c in 0..shape.p * shape.q {
        for r in 0..shape.n {
            posterior.w_mean[(r, c)] = 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }

    let mut trace = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for iter in 0..config.max_em_iters {
        for _ in 0..config.estep_inner_iters {
            estep(&mut posterior, dataset, &hyp, &ws)?;
            trace.push(elbo(&posterior, dataset, &hyp, &ws)?);
        }
        hyp = mstep(&posterior, &hyp, &dataset.x, config)?;
        ws = VbWorkspace::build(&hyp, &dataset.x, &dataset.mask)?;
        let cur = elbo(&posterior, dataset, &hyp, &ws)?;
        trace.push(cur);
        if iter > 0 && (cur - prev).abs() / prev.abs().max(1.0) < config.objective_tol {
            prev = cur;
            break;
        }
        prev = cur;
    }
    let _ = prev;
    Ok(VbModel {
        posterior,
        hyp,
        x_train: dataset.x.clone(),
        objective_trace: trace,
    })
}

/// Precomputed factors for prediction at new inputs.
pub struct VbPredictor<'a> {
    model: &'a VbModel,
    kf_chol: CholFactor,
    kw_chol: CholFactor,
}

impl<'a> VbPredictor<'a> {
    pub fn new(model: &'a VbModel) -> Result<Self> {
        let kf = vb_gram(&model.hyp.node_kernel, &model.x_train)?;
        let kw = vb_gram(&model.hyp.weight_kernel, &model.x_train)?;
        Ok(VbPredictor {
            model,
            kf_chol: safe_cholesky(&kf, "node kernel gram")?,
            kw_chol: safe_cholesky(&kw, "weight kernel gram")?,
        })
    }

    /// Extend q(f_j) to a new input by GP conditioning of the mean and
    /// variance: the projected-process extension.
    fn extend_node(&self, j: usize, x_star: &[f64]) -> Result<(f64, f64)> {
        let post = &self.model.posterior;
        let ks = DVector::from_vec(self.model.hyp.node_kernel.cross(&self.model.x_train, x_star)?);
        let kss = self.model.hyp.node_kernel.evaluate(x_star, x_star)?;
        let b = self.kf_chol.solve(&ks);
        let mean = b.dot(&post.f_mean[j]);
        let a_hat = post.ard[j].mean();
        let var = (a_hat * (kss - ks.dot(&b)) + b.dot(&(&post.f_cov[j] * &b))).max(0.0);
        Ok((mean, var))
    }

    fn extend_weight(&self, i: usize, j: usize, x_star: &[f64]) -> Result<(f64, f64)> {
        let post = &self.model.posterior;
        let c = i * post.q + j;
        let ks = DVector::from_vec(
            self.model
                .hyp
                .weight_kernel
                .cross(&self.model.x_train, x_star)?,
        );
        let kss = self.model.hyp.weight_kernel.evaluate(x_star, x_star)?;
        let b = self.kw_chol.solve(&ks);
        let mu = post.w_mean.column(c);
        let mean = b.dot(&mu);
        let var = ((kss - ks.dot(&b)) + b.dot(&(&post.w_cov[c] * &b))).max(0.0);
        Ok((mean, var))
    }

    /// Predictive distribution at a new input from the extended moments.
    pub fn predict(&self, x_star: &[f64]) -> Result<PredictiveDistribution> {
        let post = &self.model.posterior;
        let (p, q) = (post.p, post.q);
        let mut f_mean = vec![0.0; q];
        let mut f_var = vec![0.0; q];
        for j in 0..q {
            let (m, v) = self.extend_node(j, x_star)?;
            f_mean[j] = m;
            f_var[j] = v;
        }
        let mut w_mean = DMatrix::zeros(p, q);
        let mut w_var = DMatrix::zeros(p, q);
        for i in 0..p {
            for j in 0..q {
                let (m, v) = self.extend_weight(i, j, x_star)?;
                w_mean[(i, j)] = m;
                w_var[(i, j)] = v;
            }
        }
        let (mean, cov) = predictive_moments(
            &w_mean,
            &w_var,
            &f_mean,
            &f_var,
            self.model.posterior.sigma_y2.mean(),
        );
        PredictiveDistribution::from_moments(mean, clamp_psd(&cov))
    }

    /// Expected noise covariance at a new input.
    pub fn noise_covariance(&self, x_star: &[f64]) -> Result<DMatrix<f64>> {
        let post = &self.model.posterior;
        let (p, q) = (post.p, post.q);
        let mut w_mean = DMatrix::zeros(p, q);
        let mut w_var = DMatrix::zeros(p, q);
        for i in 0..p {
            for j in 0..q {
                let (m, v) = self.extend_weight(i, j, x_star)?;
                w_mean[(i, j)] = m;
                w_var[(i, j)] = v;
            }
        }
        let sf2: Vec<f64> = post.sigma_f2.iter().map(|g| g.mean()).collect();
        Ok(noise_covariance_moments(
            &w_mean,
            &w_var,
            &sf2,
            post.sigma_y2.mean(),
        ))
    }
}

/// Predictive moments of y* = W f + noise under the factorized posterior:
/// mean_i = sum_k E[W_ik] E[f_k];
/// cov_ij = sum_k [E(W_ik) E(W_jk) var(f_k) + d_ij var(W_ik) E(f_k^2)]
///        + d_ij E[sigma_y^2].
pub fn predictive_moments(
    w_mean: &DMatrix<f64>,
    w_var: &DMatrix<f64>,
    f_mean: &[f64],
    f_var: &[f64],
    sigma_y2: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let (p, q) = w_mean.shape();
    let mean = DVector::from_fn(p, |i, _| (0..q).map(|k| w_mean[(i, k)] * f_mean[k]).sum());
    let mut cov = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            let mut acc = 0.0;
            for k in 0..q {
                acc += w_mean[(i, k)] * w_mean[(j, k)] * f_var[k];
                if i == j {
                    acc += w_var[(i, k)] * (f_mean[k] * f_mean[k] + f_var[k]);
                }
            }
            if i == j {
                acc += sigma_y2;
            }
            cov[(i, j)] = acc;
        }
    }
    (mean, cov)
}

/// Expected noise covariance n = sigma_f W eps + sigma_y z under the
/// factorized posterior, with the node noise expectation applied to both the
/// mean and variance parts of E[W W']:
/// cov_ij = sum_k E[sigma_fk^2] (E(W_ik) E(W_jk) + d_ij var(W_ik))
///        + d_ij E[sigma_y^2].
pub fn noise_covariance_moments(
    w_mean: &DMatrix<f64>,
    w_var: &DMatrix<f64>,
    sigma_f2: &[f64],
    sigma_y2: f64,
) -> DMatrix<f64> {
    let (p, q) = w_mean.shape();
    let mut cov = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            let mut acc = 0.0;
            for k in 0..q {
                acc += sigma_f2[k] * w_mean[(i, k)] * w_mean[(j, k)];
                if i == j {
                    acc += sigma_f2[k] * w_var[(i, k)];
                }
            }
            if i == j {
                acc += sigma_y2;
            }
            cov[(i, j)] = acc;
        }
    }
    cov
}

/// One-shot wrappers over [`VbPredictor`].
pub fn predict_vb(model: &VbModel, x_star: &[f64]) -> Result<PredictiveDistribution> {
    VbPredictor::new(model)?.predict(x_star)
}

pub fn noise_covariance_vb(model: &VbModel, x_star: &[f64]) -> Result<DMatrix<f64>> {
    VbPredictor::new(model)?.noise_covariance(x_star)
}

/// Fit each candidate node count and keep the one with the highest final
/// objective (the bound as marginal-likelihood proxy); ties break toward
/// the smaller q.
pub fn model_select_q(
    dataset: &Dataset,
    q_candidates: &[usize],
    config: &VbConfig,
    base_hyp: &Hyperparams,
) -> Result<(usize, Vec<(usize, f64)>, Vec<VbModel>)> {
    if q_candidates.is_empty() {
        return Err(GprnError::input("model selection needs at least one candidate q"));
    }
    let mut table = Vec::new();
    let mut models = Vec::new();
    let mut last_err = None;
    for &q in q_candidates {
        let shape = match NetworkShape::new(dataset.n(), dataset.p(), q, dataset.d()) {
            Ok(s) => s,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let mut hyp = base_hyp.clone();
        hyp.ard = vec![1.0; q];
        match fit_vb(dataset, &shape, config, &hyp) {
            Ok(model) => {
                let score = *model.objective_trace.last().unwrap_or(&f64::NEG_INFINITY);
                table.push((q, score));
                models.push(model);
            }
            Err(e) => last_err = Some(e),
        }
    }
    if table.is_empty() {
        return Err(GprnError::FitFailure(format!(
            "every candidate q failed to fit; last error: {}",
            last_err.map(|e| e.to_string()).unwrap_or_default()
        )));
    }
    let mut best = 0;
    for k in 1..table.len() {
        let (q, score) = table[k];
        let (bq, bscore) = table[best];
        if score > bscore || (score == bscore && q < bq) {
            best = k;
        }
    }
    Ok((table[best].0, table, models))
}
