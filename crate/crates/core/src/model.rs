//! The generative network model: parameter packing, the masked Gaussian
//! likelihood, the adaptive mixing kernel, the input-dependent noise
//! covariance, and the ARD rescaling of node kernels.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GprnError, Result};
use crate::kernels::KernelSpec;
use crate::linalg::BlockPrior;

/// Problem dimensions: N training inputs of dimension d, p outputs, q nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub d: usize,
}

impl NetworkShape {
    pub fn new(n: usize, p: usize, q: usize, d: usize) -> Result<Self> {
        if n == 0 || p == 0 || q == 0 || d == 0 {
            return Err(GprnError::input(format!(
                "network shape components must all be >= 1, got N={n}, p={p}, q={q}, d={d}"
            )));
        }
        Ok(NetworkShape { n, p, q, d })
    }

    /// Length of the stacked vector: N q (p + 1).
    pub fn packed_len(&self) -> usize {
        self.n * self.q * (self.p + 1)
    }
}

/// Node and weight function values at the training inputs.
///
/// `fhat` is N x q (column j holds node j). Weights are stored N x (p q)
/// with column index i*q + j for weight (output i, node j); together with
/// node-blocks-first packing this matches the block ordering of the prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub fhat: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub p: usize,
    pub q: usize,
}

impl NetworkParams {
    pub fn zeros(shape: &NetworkShape) -> Self {
        NetworkParams {
            fhat: DMatrix::zeros(shape.n, shape.q),
            w: DMatrix::zeros(shape.n, shape.p * shape.q),
            p: shape.p,
            q: shape.q,
        }
    }

    pub fn n(&self) -> usize {
        self.fhat.nrows()
    }

    /// W(x_n) as a p x q matrix.
    pub fn weight_matrix_at(&self, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.p, self.q, |i, j| self.w[(n, i * self.q + j)])
    }

    /// Node values at x_n as a q-vector.
    pub fn node_values_at(&self, n: usize) -> DVector<f64> {
        DVector::from_fn(self.q, |j, _| self.fhat[(n, j)])
    }

    /// Values of weight function (i, j) across all training inputs.
    pub fn weight_column(&self, i: usize, j: usize) -> DVector<f64> {
        self.w.column(i * self.q + j).into_owned()
    }

    /// Network output W(x_n) fhat(x_n) for every n, as an N x p matrix.
    pub fn output_means(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut out = DMatrix::zeros(n, self.p);
        for r in 0..n {
            for i in 0..self.p {
                let mut acc = 0.0;
                for j in 0..self.q {
                    acc += self.w[(r, i * self.q + j)] * self.fhat[(r, j)];
                }
                out[(r, i)] = acc;
            }
        }
        out
    }
}

/// Flatten into the stacked vector: q node blocks of length N first, then
/// the p*q weight blocks in row-major (output, node) order.
pub fn pack(params: &NetworkParams) -> DVector<f64> {
    let mut u = Vec::with_capacity(params.fhat.len() + params.w.len());
    u.extend_from_slice(params.fhat.as_slice());
    u.extend_from_slice(params.w.as_slice());
    DVector::from_vec(u)
}

/// Inverse of [`pack`].
pub fn unpack(u: &DVector<f64>, shape: &NetworkShape) -> Result<NetworkParams> {
    if u.len() != shape.packed_len() {
        return Err(GprnError::input(format!(
            "packed vector has length {}, expected N q (p+1) = {}",
            u.len(),
            shape.packed_len()
        )));
    }
    let nq = shape.n * shape.q;
    let fhat = DMatrix::from_column_slice(shape.n, shape.q, &u.as_slice()[..nq]);
    let w = DMatrix::from_column_slice(shape.n, shape.p * shape.q, &u.as_slice()[nq..]);
    Ok(NetworkParams {
        fhat,
        w,
        p: shape.p,
        q: shape.q,
    })
}

/// Draw network parameters from the block-diagonal prior.
pub fn prior_sample<R: Rng>(prior: &BlockPrior, rng: &mut R) -> NetworkParams {
    let u = prior.sample(rng);
    let shape = NetworkShape {
        n: prior.n(),
        p: prior.p(),
        q: prior.q(),
        d: 1,
    };
    unpack(&u, &shape).expect("prior sample has the packed length by construction")
}

/// Inverse-Gamma prior parameters (shape alpha, rate beta).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IgPrior {
    pub shape: f64,
    pub rate: f64,
}

impl IgPrior {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && rate > 0.0) {
            return Err(GprnError::input(format!(
                "inverse-Gamma prior needs positive shape and rate, got ({shape}, {rate})"
            )));
        }
        Ok(IgPrior { shape, rate })
    }
}

impl Default for IgPrior {
    fn default() -> Self {
        IgPrior {
            shape: 1.0,
            rate: 1.0,
        }
    }
}

/// Kernel and noise hyperparameters, per-node ARD signal variances, and the
/// inverse-Gamma priors used by the variational fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub node_kernel: KernelSpec,
    pub weight_kernel: KernelSpec,
    pub sigma_f: f64,
    pub sigma_y: f64,
    pub ard: Vec<f64>,
    pub sigma_f2_prior: IgPrior,
    pub sigma_y2_prior: IgPrior,
    pub ard_prior: IgPrior,
}

impl Hyperparams {
    pub fn new(
        node_kernel: KernelSpec,
        weight_kernel: KernelSpec,
        sigma_f: f64,
        sigma_y: f64,
        q: usize,
    ) -> Result<Self> {
        let hyp = Hyperparams {
            node_kernel,
            weight_kernel,
            sigma_f,
            sigma_y,
            ard: vec![1.0; q],
            sigma_f2_prior: IgPrior::default(),
            sigma_y2_prior: IgPrior::default(),
            ard_prior: IgPrior::default(),
        };
        hyp.validate(q)?;
        Ok(hyp)
    }

    pub fn validate(&self, q: usize) -> Result<()> {
        if !(self.sigma_f >= 0.0 && self.sigma_f.is_finite()) {
            return Err(GprnError::input("sigma_f must be nonnegative and finite"));
        }
        if !(self.sigma_y > 0.0 && self.sigma_y.is_finite()) {
            return Err(GprnError::input("sigma_y must be positive and finite"));
        }
        if self.ard.len() != q {
            return Err(GprnError::input(format!(
                "ARD vector length {} does not match q = {q}",
                self.ard.len()
            )));
        }
        if self.ard.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(GprnError::input("ARD signal variances must be positive"));
        }
        Ok(())
    }
}

/// Masked Gaussian log likelihood of the observations given network values.
///
/// Sums log N(y_i(x_n); [W(x_n) fhat(x_n)]_i, sigma_y^2) over observed
/// entries only. Linear in p: no p x p matrix is formed or factored.
pub fn log_likelihood(
    params: &NetworkParams,
    y: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    sigma_y: f64,
) -> Result<f64> {
    Ok(log_likelihood_counted(params, y, mask, sigma_y)?.0)
}

/// As [`log_likelihood`], also returning the number of inner multiply-adds,
/// which is exactly (observed entries) * q. Exposes the O(N q p) cost
/// structurally for tests.
pub fn log_likelihood_counted(
    params: &NetworkParams,
    y: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    sigma_y: f64,
) -> Result<(f64, u64)> {
    if !(sigma_y > 0.0 && sigma_y.is_finite()) {
        return Err(GprnError::input(format!(
            "sigma_y must be positive and finite, got {sigma_y}"
        )));
    }
    let n = params.n();
    if y.nrows() != n || y.ncols() != params.p || mask.shape() != y.shape() {
        return Err(GprnError::input(format!(
            "likelihood shape mismatch: params {}x{}, Y {}x{}, mask {}x{}",
            n,
            params.p,
            y.nrows(),
            y.ncols(),
            mask.nrows(),
            mask.ncols()
        )));
    }
    let inv_var = 1.0 / (sigma_y * sigma_y);
    let ln_norm = -0.5 * (2.0 * std::f64::consts::PI * sigma_y * sigma_y).ln();
    let mut total = 0.0;
    let mut ops: u64 = 0;
    for r in 0..n {
        for i in 0..params.p {
            if !mask[(r, i)] {
                continue;
            }
            let mut mean = 0.0;
            for j in 0..params.q {
                mean += params.w[(r, i * params.q + j)] * params.fhat[(r, j)];
                ops += 1;
            }
            let resid = y[(r, i)] - mean;
            total += ln_norm - 0.5 * resid * resid * inv_var;
        }
    }
    Ok((total, ops))
}

/// The adaptive kernel of one output, conditioned on its weight values:
/// k_yi(x, x') = sum_j W_ij(x) [a_j k_f(x, x') + sigma_f^2 d_xx'] W_ij(x')
///             + sigma_y^2 d_xx', with the delta on exact input equality.
pub fn mixing_kernel(
    hyp: &Hyperparams,
    w_at_x: &[f64],
    w_at_x_prime: &[f64],
    x: &[f64],
    x_prime: &[f64],
) -> Result<f64> {
    let q = hyp.ard.len();
    if w_at_x.len() != q || w_at_x_prime.len() != q {
        return Err(GprnError::input(format!(
            "mixing kernel expects {q} weight values per point, got {} and {}",
            w_at_x.len(),
            w_at_x_prime.len()
        )));
    }
    let same_point = x == x_prime;
    let delta = if same_point { 1.0 } else { 0.0 };
    let kf = hyp.node_kernel.evaluate(x, x_prime)?;
    let mut total = 0.0;
    for j in 0..q {
        total += w_at_x[j] * (hyp.ard[j] * kf + hyp.sigma_f * hyp.sigma_f * delta) * w_at_x_prime[j];
    }
    Ok(total + hyp.sigma_y * hyp.sigma_y * delta)
}

/// Noise covariance at one input: sigma_f^2 W W' + sigma_y^2 I.
pub fn noise_covariance(w_at_x: &DMatrix<f64>, sigma_f: f64, sigma_y: f64) -> DMatrix<f64> {
    let p = w_at_x.nrows();
    let mut cov = w_at_x * w_at_x.transpose() * (sigma_f * sigma_f);
    // Symmetrize exactly: the product can differ in the last ulp across the diagonal.
    for i in 0..p {
        for j in 0..i {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
        cov[(i, i)] += sigma_y * sigma_y;
    }
    cov
}

/// One realization of the signal/noise decomposition at a single input:
/// signal = W f, noise = sigma_f W eps + sigma_y z with fresh eps, z.
pub fn decompose<R: Rng>(
    w_at_x: &DMatrix<f64>,
    f_at_x: &DVector<f64>,
    sigma_f: f64,
    sigma_y: f64,
    rng: &mut R,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let (p, q) = w_at_x.shape();
    let signal = w_at_x * f_at_x;
    let eps = DVector::from_iterator(q, (0..q).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let z = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let noise = w_at_x * eps * sigma_f + z * sigma_y;
    let y = &signal + &noise;
    (signal, noise, y)
}

/// Elementwise ARD scaling of a node Gram matrix by a_j > 0.
pub fn apply_ard(node_gram: &DMatrix<f64>, a_j: f64) -> Result<DMatrix<f64>> {
    if !(a_j > 0.0 && a_j.is_finite()) {
        return Err(GprnError::input(format!(
            "ARD coefficient must be positive and finite, got {a_j}"
        )));
    }
    Ok(node_gram * a_j)
}

/// Exponentiate the weight values, for the positive-weights sampling option.
/// The prior stays on the untransformed weights; the likelihood and
/// predictions consume exp(w).
pub fn exp_weight_transform(params: &NetworkParams) -> NetworkParams {
    NetworkParams {
        fhat: params.fhat.clone(),
        w: params.w.map(f64::exp),
        p: params.p,
        q: params.q,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::NoisyNodeKernel;
    use crate::linalg::{build_block_prior, safe_cholesky};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn se(a: f64, l: f64) -> KernelSpec {
        KernelSpec::squared_exponential(a, l).unwrap()
    }

    fn shape(n: usize, p: usize, q: usize) -> NetworkShape {
        NetworkShape::new(n, p, q, 1).unwrap()
    }

    #[test]
    fn pack_ordering_definition() {
        let params = NetworkParams {
            fhat: DMatrix::from_element(1, 1, 2.0),
            w: DMatrix::from_element(1, 1, 3.0),
            p: 1,
            q: 1,
        };
        assert_eq!(pack(&params), DVector::from_vec(vec![2.0, 3.0]));
    }

    #[test]
    fn pack_blocks_are_node_first_then_row_major_weights() {
        // N=2, p=2, q=2: u = [f1, f2, W11, W12, W21, W22] with each block length 2.
        let sh = shape(2, 2, 2);
        let mut params = NetworkParams::zeros(&sh);
        params.fhat[(0, 0)] = 1.0;
        params.fhat[(1, 0)] = 2.0;
        params.fhat[(0, 1)] = 3.0;
        params.fhat[(1, 1)] = 4.0;
        for i in 0..2 {
            for j in 0..2 {
                params.w[(0, i * 2 + j)] = 10.0 + (i * 2 + j) as f64;
                params.w[(1, i * 2 + j)] = 20.0 + (i * 2 + j) as f64;
            }
        }
        let u = pack(&params);
        assert_eq!(
            u.as_slice(),
            &[1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 11.0, 21.0, 12.0, 22.0, 13.0, 23.0]
        );
        assert_eq!(unpack(&u, &sh).unwrap(), params);
    }

    #[test]
    fn unpack_wrong_length_errors() {
        let sh = shape(2, 2, 1);
        for len in [sh.packed_len() - 1, sh.packed_len() + 1] {
            assert!(unpack(&DVector::zeros(len), &sh).is_err());
        }
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(n in 1usize..5, p in 1usize..4, q in 1usize..4, seed in 0u64..50) {
            let sh = shape(n, p, q);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::Rng;
            let mut params = NetworkParams::zeros(&sh);
            params.fhat.iter_mut().for_each(|v| *v = rng.gen_range(-3.0..3.0));
            params.w.iter_mut().for_each(|v| *v = rng.gen_range(-3.0..3.0));
            let u = pack(&params);
            prop_assert_eq!(unpack(&u, &sh).unwrap(), params.clone());
            prop_assert_eq!(pack(&unpack(&u, &sh).unwrap()), u);
        }
    }

    #[test]
    fn likelihood_standard_normal_at_zero() {
        let sh = shape(1, 1, 1);
        let mut params = NetworkParams::zeros(&sh);
        params.fhat[(0, 0)] = 17.0; // arbitrary; weight is zero
        let y = DMatrix::zeros(1, 1);
        let mask = DMatrix::from_element(1, 1, true);
        let ll = log_likelihood(&params, &y, &mask, 1.0).unwrap();
        assert_relative_eq!(ll, -0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-12);
    }

    #[test]
    fn likelihood_zero_residuals() {
        let sh = shape(3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        let mut params = NetworkParams::zeros(&sh);
        params.fhat.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        params.w.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let y = params.output_means();
        let mask = DMatrix::from_element(3, 2, true);
        let s = 0.7;
        let ll = log_likelihood(&params, &y, &mask, s).unwrap();
        let expected = -(6.0 / 2.0) * (2.0 * std::f64::consts::PI * s * s).ln();
        assert_relative_eq!(ll, expected, epsilon = 1e-12);
    }

    #[test]
    fn likelihood_all_masked_is_zero() {
        let sh = shape(2, 2, 1);
        let params = NetworkParams::zeros(&sh);
        let y = DMatrix::from_element(2, 2, 5.0);
        let mask = DMatrix::from_element(2, 2, false);
        assert_eq!(log_likelihood(&params, &y, &mask, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn likelihood_rejects_bad_sigma() {
        let sh = shape(1, 1, 1);
        let params = NetworkParams::zeros(&sh);
        let y = DMatrix::zeros(1, 1);
        let mask = DMatrix::from_element(1, 1, true);
        assert!(log_likelihood(&params, &y, &mask, 0.0).is_err());
        assert!(log_likelihood(&params, &y, &mask, -1.0).is_err());
    }

    #[test]
    fn likelihood_op_count_linear_in_p() {
        let n = 10;
        let q = 3;
        let mask_ops = |p: usize| {
            let sh = shape(n, p, q);
            let params = NetworkParams::zeros(&sh);
            let y = DMatrix::zeros(n, p);
            let mask = DMatrix::from_element(n, p, true);
            log_likelihood_counted(&params, &y, &mask, 1.0).unwrap().1
        };
        let ops_100 = mask_ops(100);
        let ops_400 = mask_ops(400);
        assert_eq!(ops_100, (n * 100 * q) as u64);
        assert_eq!(ops_400, 4 * ops_100);
    }

    fn hyp(q: usize, sigma_f: f64, sigma_y: f64) -> Hyperparams {
        Hyperparams::new(se(1.0, 1.0), se(1.0, 1.0), sigma_f, sigma_y, q).unwrap()
    }

    #[test]
    fn mixing_kernel_identity_weights() {
        let h = hyp(1, 0.0, 1e-12);
        let mut h0 = h.clone();
        h0.sigma_y = 1e-300; // effectively zero while staying positive
        let k = mixing_kernel(&h0, &[1.0], &[1.0], &[0.0], &[0.7]).unwrap();
        let kf = se(1.0, 1.0).evaluate(&[0.0], &[0.7]).unwrap();
        assert_relative_eq!(k, kf, max_relative = 1e-12);
    }

    #[test]
    fn mixing_kernel_scaled_weights_at_same_point() {
        let mut h = hyp(1, 0.0, 1e-300);
        h.sigma_f = 0.0;
        let k = mixing_kernel(&h, &[2.0], &[2.0], &[0.5], &[0.5]).unwrap();
        assert_relative_eq!(k, 4.0, max_relative = 1e-12);
    }

    #[test]
    fn mixing_kernel_zero_weight_kills_branch() {
        let h = hyp(2, 0.3, 0.2);
        let k2 = mixing_kernel(&h, &[1.0, 0.0], &[1.0, 0.0], &[0.0], &[0.4]).unwrap();
        let h1 = hyp(1, 0.3, 0.2);
        let k1 = mixing_kernel(&h1, &[1.0], &[1.0], &[0.0], &[0.4]).unwrap();
        assert_relative_eq!(k2, k1, max_relative = 1e-14);
    }

    #[test]
    fn mixing_kernel_constant_weights_is_stationary() {
        // With constant weights the output kernel depends on x, x' only
        // through the node kernel, i.e. only through |x - x'| here.
        let h = hyp(2, 0.0, 1e-300);
        let w = [0.7, -1.2];
        let k_a = mixing_kernel(&h, &w, &w, &[0.0], &[0.8]).unwrap();
        let k_b = mixing_kernel(&h, &w, &w, &[5.0], &[5.8]).unwrap();
        assert_relative_eq!(k_a, k_b, max_relative = 1e-14);
    }

    #[test]
    fn noise_covariance_zero_weights() {
        let w = DMatrix::zeros(3, 2);
        let cov = noise_covariance(&w, 1.0, 0.5);
        assert_eq!(cov, DMatrix::identity(3, 3) * 0.25);
    }

    #[test]
    fn noise_covariance_outer_product() {
        let w = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let cov = noise_covariance(&w, 1.0, 0.0);
        assert_eq!(cov, DMatrix::from_element(2, 2, 1.0));
    }

    #[test]
    fn noise_covariance_eigenvalues_at_least_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        for _ in 0..10 {
            let w = DMatrix::from_fn(3, 2, |_, _| rng.gen_range(-2.0..2.0));
            let sigma_y = rng.gen_range(0.1..1.0);
            let cov = noise_covariance(&w, rng.gen_range(0.0..2.0), sigma_y);
            assert_eq!(cov, cov.transpose());
            let eig = nalgebra::SymmetricEigen::new(cov);
            assert!(eig.eigenvalues.min() >= sigma_y * sigma_y - 1e-12);
        }
    }

    #[test]
    fn decompose_no_noise_is_exact_signal() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 0.3]);
        let f = DVector::from_vec(vec![0.7, -1.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (signal, noise, y) = decompose(&w, &f, 0.0, 0.0, &mut rng);
        assert_eq!(noise, DVector::zeros(2));
        assert_eq!(y, signal);
        assert_eq!(signal, &w * &f);
    }

    #[test]
    fn decompose_signal_deterministic() {
        let w = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let f = DVector::from_vec(vec![3.0]);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(999);
        let (s1, _, _) = decompose(&w, &f, 0.5, 0.5, &mut r1);
        let (s2, _, _) = decompose(&w, &f, 0.5, 0.5, &mut r2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn decompose_noise_covariance_monte_carlo() {
        let w = DMatrix::from_row_slice(2, 1, &[1.0, -0.6]);
        let f = DVector::from_vec(vec![0.0]);
        let (sigma_f, sigma_y) = (0.8, 0.3);
        let target = noise_covariance(&w, sigma_f, sigma_y);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let draws = 100_000;
        let mut acc = DMatrix::zeros(2, 2);
        for _ in 0..draws {
            let (_, noise, _) = decompose(&w, &f, sigma_f, sigma_y, &mut rng);
            acc += &noise * noise.transpose();
        }
        acc /= draws as f64;
        let rel = (&acc - &target).norm() / target.norm();
        assert!(rel < 0.05, "relative error {rel}");
    }

    #[test]
    fn apply_ard_identity_and_scaling() {
        let g = se(1.0, 1.0).gram(&[vec![0.0], vec![0.5]]).unwrap();
        assert_eq!(apply_ard(&g, 1.0).unwrap(), g);
        let g4 = apply_ard(&g, 4.0).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(g4[(i, j)], 4.0 * g[(i, j)], max_relative = 1e-15);
            }
        }
        assert!(apply_ard(&g, 0.0).is_err());
        assert!(apply_ard(&g, -1.0).is_err());
    }

    #[test]
    fn apply_ard_shifts_logdet() {
        let pts: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        let g = se(1.0, 0.7).gram(&pts).unwrap();
        let a = 3.0;
        let ld = safe_cholesky(&g, "g").unwrap().logdet();
        let ld_a = safe_cholesky(&apply_ard(&g, a).unwrap(), "ag").unwrap().logdet();
        assert_relative_eq!(ld_a, ld + 4.0 * a.ln(), epsilon = 1e-9);
    }

    #[test]
    fn exp_weight_transform_basics() {
        let sh = shape(2, 1, 1);
        let mut params = NetworkParams::zeros(&sh);
        params.w[(0, 0)] = 0.0;
        params.w[(1, 0)] = 2.0;
        let t = exp_weight_transform(&params);
        assert_eq!(t.w[(0, 0)], 1.0);
        assert_relative_eq!(t.w[(1, 0)], 2.0f64.exp(), max_relative = 1e-15);
        assert_eq!(t.fhat, params.fhat);

        // Monotone and log-invertible.
        for w in [-10.0, -1.0, 0.0, 0.5, 10.0] {
            params.w[(0, 0)] = w;
            let t = exp_weight_transform(&params);
            assert_relative_eq!(t.w[(0, 0)].ln(), w, epsilon = 1e-12);
        }
    }

    #[test]
    fn prior_sample_unpacks_consistently() {
        let x: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64 * 0.3]).collect();
        let kf = NoisyNodeKernel::new(se(1.0, 1.0), 0.1).unwrap();
        let prior = build_block_prior(&kf, &se(1.0, 1.0), &x, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = prior_sample(&prior, &mut rng);
        assert_eq!(params.fhat.shape(), (3, 2));
        assert_eq!(params.w.shape(), (3, 4));
    }
}
