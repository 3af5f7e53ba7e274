//! Safeguarded Cholesky factorization, the block-diagonal prior over stacked
//! node/weight function values, and the standard single-output GP regression
//! baseline.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{GprnError, Result};
use crate::kernels::{KernelSpec, NoisyNodeKernel};

/// Jitter escalation ladder, as multiples of mean(diag(M)).
pub const JITTER_LADDER: [f64; 5] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4];

/// A lower-triangular Cholesky factor together with the jitter that was
/// required to obtain it.
pub struct CholFactor {
    l: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    jitter_used: f64,
}

impl std::fmt::Debug for CholFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CholFactor")
            .field("dim", &self.l.nrows())
            .field("jitter_used", &self.jitter_used)
            .finish()
    }
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    /// log det(M + jitter I), from the factor diagonal.
    pub fn logdet(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solve (M + jitter I) x = b.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// Solve (M + jitter I) X = B columnwise.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// Dense inverse of the factored matrix.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// v' M^{-1} v.
    pub fn quad_form_inv(&self, v: &DVector<f64>) -> f64 {
        v.dot(&self.solve(v))
    }

    /// tr(M^{-1} B).
    pub fn trace_solve(&self, b: &DMatrix<f64>) -> f64 {
        self.solve_mat(b).trace()
    }

    /// L z, mapping iid standard normals to a draw from N(0, M + jitter I).
    pub fn mul_lower(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.l * z
    }
}

/// Cholesky with a deterministic jitter ladder. The matrix is symmetrized as
/// (M + M')/2 first; `role` names the matrix in the error when every ladder
/// step fails.
pub fn safe_cholesky(m: &DMatrix<f64>, role: &str) -> Result<CholFactor> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(GprnError::input(format!(
            "cholesky of '{role}': need a nonempty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let sym = (m + m.transpose()) * 0.5;
    let scale = sym.diagonal().mean();
    let mut max_jitter = 0.0;
    for mult in JITTER_LADDER {
        let jitter = mult * scale;
        max_jitter = jitter;
        let mut attempt = sym.clone();
        for i in 0..attempt.nrows() {
            attempt[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(attempt) {
            let l = chol.l();
            if l.diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Ok(CholFactor {
                    l,
                    chol,
                    jitter_used: jitter,
                });
            }
        }
    }
    Err(GprnError::SingularMatrix {
        role: role.to_string(),
        max_jitter,
    })
}

/// The block-diagonal prior covariance over the stacked vector of all node
/// and weight function values at the training inputs, held as exactly two
/// N x N factors plus per-node scale multipliers. The full matrix, of size
/// Nq(p+1) x Nq(p+1), is never materialized.
pub struct BlockPrior {
    node_chol: CholFactor,
    weight_chol: CholFactor,
    n: usize,
    p: usize,
    q: usize,
    /// Per-node signal variances a_j; chol(a K) = sqrt(a) chol(K).
    node_scales: Vec<f64>,
}

impl BlockPrior {
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn p(&self) -> usize {
        self.p
    }
    pub fn q(&self) -> usize {
        self.q
    }

    /// Total stacked dimension N q (p + 1).
    pub fn dim(&self) -> usize {
        self.n * self.q * (self.p + 1)
    }

    pub fn node_chol(&self) -> &CholFactor {
        &self.node_chol
    }

    pub fn weight_chol(&self) -> &CholFactor {
        &self.weight_chol
    }

    pub fn node_scales(&self) -> &[f64] {
        &self.node_scales
    }

    /// Apply per-node ARD signal variances (length q, all positive).
    pub fn with_node_scales(mut self, ard: &[f64]) -> Result<Self> {
        if ard.len() != self.q {
            return Err(GprnError::input(format!(
                "ARD vector length {} does not match q = {}",
                ard.len(),
                self.q
            )));
        }
        if ard.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(GprnError::input("ARD signal variances must be positive"));
        }
        self.node_scales = ard.to_vec();
        Ok(self)
    }

    /// log det of the full block-diagonal matrix.
    pub fn logdet(&self) -> f64 {
        let node: f64 = self
            .node_scales
            .iter()
            .map(|a| self.n as f64 * a.ln() + self.node_chol.logdet())
            .sum();
        node + (self.p * self.q) as f64 * self.weight_chol.logdet()
    }

    /// Draw u ~ N(0, C_B) from iid standard normals supplied in `z`.
    ///
    /// Ordering matches the packing of the stacked vector: q node blocks of
    /// length N, then p*q weight blocks in row-major (output, node) order.
    pub fn sample_with_z(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.dim() {
            return Err(GprnError::input(format!(
                "prior sample needs {} normals, got {}",
                self.dim(),
                z.len()
            )));
        }
        let n = self.n;
        let mut u = DVector::zeros(self.dim());
        for j in 0..self.q {
            let block = z.rows(j * n, n).into_owned();
            let sample = self.node_chol.mul_lower(&block) * self.node_scales[j].sqrt();
            u.rows_mut(j * n, n).copy_from(&sample);
        }
        let offset = self.q * n;
        for b in 0..self.p * self.q {
            let block = z.rows(offset + b * n, n).into_owned();
            let sample = self.weight_chol.mul_lower(&block);
            u.rows_mut(offset + b * n, n).copy_from(&sample);
        }
        Ok(u)
    }

    /// Draw u ~ N(0, C_B) using the supplied generator.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| rng.sample(StandardNormal)));
        self.sample_with_z(&z).expect("dimensions match by construction")
    }

    /// Dense C_B, for brute-force comparison at small sizes only.
    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.n;
        let d = self.dim();
        let node = self.node_chol.l() * self.node_chol.l().transpose();
        let weight = self.weight_chol.l() * self.weight_chol.l().transpose();
        let mut c = DMatrix::zeros(d, d);
        for j in 0..self.q {
            c.view_mut((j * n, j * n), (n, n))
                .copy_from(&(&node * self.node_scales[j]));
        }
        let offset = self.q * n;
        for b in 0..self.p * self.q {
            c.view_mut((offset + b * n, offset + b * n), (n, n))
                .copy_from(&weight);
        }
        c
    }
}

/// Factor the node and weight Gram matrices once each, exploiting
/// chol(blkdiag(A, B, ...)) = blkdiag(chol(A), chol(B), ...).
pub fn build_block_prior(
    kf: &NoisyNodeKernel,
    kw: &KernelSpec,
    x: &[Vec<f64>],
    p: usize,
    q: usize,
) -> Result<BlockPrior> {
    if x.is_empty() || p == 0 || q == 0 {
        return Err(GprnError::input(
            "block prior needs N >= 1, p >= 1, q >= 1",
        ));
    }
    let node_gram = kf.gram(x)?;
    let weight_gram = kw.gram(x)?;
    Ok(BlockPrior {
        node_chol: safe_cholesky(&node_gram, "node kernel gram")?,
        weight_chol: safe_cholesky(&weight_gram, "weight kernel gram")?,
        n: x.len(),
        p,
        q,
        node_scales: vec![1.0; q],
    })
}

/// Posterior mean and variance of a single-output GP at one test point.
pub fn gp_posterior(
    spec: &KernelSpec,
    sigma_n: f64,
    x: &[Vec<f64>],
    y: &[f64],
    x_star: &[f64],
) -> Result<(f64, f64)> {
    let (means, vars) = gp_posterior_many(spec, sigma_n, x, y, std::slice::from_ref(&x_star.to_vec()))?;
    Ok((means[0], vars[0]))
}

/// Same as [`gp_posterior`] but factors the training covariance once for a
/// batch of test points.
pub fn gp_posterior_many(
    spec: &KernelSpec,
    sigma_n: f64,
    x: &[Vec<f64>],
    y: &[f64],
    x_stars: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if y.len() != x.len() {
        return Err(GprnError::input(format!(
            "gp posterior: {} targets for {} inputs",
            y.len(),
            x.len()
        )));
    }
    let mut k = spec.gram(x)?;
    for i in 0..k.nrows() {
        k[(i, i)] += sigma_n * sigma_n;
    }
    let chol = safe_cholesky(&k, "gp train covariance")?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let mut means = Vec::with_capacity(x_stars.len());
    let mut vars = Vec::with_capacity(x_stars.len());
    for xs in x_stars {
        let ks = DVector::from_vec(spec.cross(x, xs)?);
        let mu = ks.dot(&alpha);
        let v = spec.evaluate(xs, xs)? - ks.dot(&chol.solve(&ks));
        means.push(mu);
        vars.push(v.max(0.0));
    }
    Ok((means, vars))
}

/// Log marginal likelihood of a single-output GP, for baseline model choice.
pub fn gp_log_marginal(spec: &KernelSpec, sigma_n: f64, x: &[Vec<f64>], y: &[f64]) -> Result<f64> {
    let mut k = spec.gram(x)?;
    for i in 0..k.nrows() {
        k[(i, i)] += sigma_n * sigma_n;
    }
    let chol = safe_cholesky(&k, "gp train covariance")?;
    let yv = DVector::from_column_slice(y);
    let n = y.len() as f64;
    Ok(-0.5 * chol.quad_form_inv(&yv) - 0.5 * chol.logdet() - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
}

/// Independent GPs, one per output, with per-output hyperparameters chosen by
/// log marginal likelihood over a small grid. This is the comparison model
/// for the network fits.
pub struct IndependentGpBaseline {
    pub per_output: Vec<(KernelSpec, f64)>,
    x_train: Vec<Vec<f64>>,
    y_train: Vec<Vec<f64>>,
    x_obs_idx: Vec<Vec<usize>>,
}

impl IndependentGpBaseline {
    /// Fit per-output hyperparameters on observed entries only.
    ///
    /// The grid spans length-scales and noise levels around the data scale;
    /// the amplitude is matched to each output's empirical variance.
    pub fn fit(
        x: &[Vec<f64>],
        y: &DMatrix<f64>,
        mask: &DMatrix<bool>,
        base_family: &KernelSpec,
    ) -> Result<Self> {
        let p = y.ncols();
        let mut per_output = Vec::with_capacity(p);
        let mut y_train = Vec::with_capacity(p);
        let mut x_obs_idx = Vec::with_capacity(p);
        let ls_grid = [0.05, 0.1, 0.2, 0.4, 0.8, 1.6, 3.2];
        let sn_grid = [0.01, 0.05, 0.1, 0.2, 0.4, 0.8];
        for i in 0..p {
            let idx: Vec<usize> = (0..y.nrows()).filter(|&n| mask[(n, i)]).collect();
            if idx.is_empty() {
                return Err(GprnError::input(format!(
                    "baseline: output {i} has no observed entries"
                )));
            }
            let yo: Vec<f64> = idx.iter().map(|&n| y[(n, i)]).collect();
            let xo: Vec<Vec<f64>> = idx.iter().map(|&n| x[n].clone()).collect();
            let mean = yo.iter().sum::<f64>() / yo.len() as f64;
            let var = yo.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / yo.len() as f64;
            let amp = var.max(1e-6);
            let mut best = (f64::NEG_INFINITY, *base_family, 0.1);
            for &ls in &ls_grid {
                let spec = base_family.scaled(amp / base_family.amplitude)?.with_length_scale(ls)?;
                for &sn_rel in &sn_grid {
                    let sn = sn_rel * amp.sqrt();
                    if let Ok(lml) = gp_log_marginal(&spec, sn, &xo, &yo) {
                        if lml > best.0 {
                            best = (lml, spec, sn);
                        }
                    }
                }
            }
            per_output.push((best.1, best.2));
            y_train.push(yo);
            x_obs_idx.push(idx);
        }
        Ok(IndependentGpBaseline {
            per_output,
            x_train: x.to_vec(),
            y_train,
            x_obs_idx,
        })
    }

    /// Predictive means and variances at the test points, N* x p each.
    pub fn predict(&self, x_stars: &[Vec<f64>]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let p = self.per_output.len();
        let mut means = DMatrix::zeros(x_stars.len(), p);
        let mut vars = DMatrix::zeros(x_stars.len(), p);
        for i in 0..p {
            let xo: Vec<Vec<f64>> = self.x_obs_idx[i].iter().map(|&n| self.x_train[n].clone()).collect();
            let (spec, sn) = &self.per_output[i];
            let (m, v) = gp_posterior_many(spec, *sn, &xo, &self.y_train[i], x_stars)?;
            for (r, (mm, vv)) in m.into_iter().zip(v).enumerate() {
                means[(r, i)] = mm;
                vars[(r, i)] = vv;
            }
        }
        Ok((means, vars))
    }
}
