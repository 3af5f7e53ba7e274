//! Synthetic datasets drawn from the generative network model, with the true
//! signal retained for oracle tests.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{GprnError, Result};
use crate::kernels::NoisyNodeKernel;
use crate::linalg::build_block_prior;
use crate::model::{unpack, Hyperparams, NetworkParams, NetworkShape};
use crate::rng::root_rng;

/// A generated dataset and everything needed to score a fit against it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTruth {
    /// Realized network values at the inputs; `fhat` holds f + sigma_f eps.
    pub params: NetworkParams,
    /// Noise-free node values.
    pub f_true: DMatrix<f64>,
    pub hyp: Hyperparams,
    /// W(x) f(x) at each input, N x p.
    pub signal: DMatrix<f64>,
    pub dataset: Dataset,
}

/// Equally spaced grid of n points in [0, 1]^d. For d > 1 the points walk a
/// row-major lattice with ceil(n^(1/d)) levels per axis.
pub fn grid_inputs(n: usize, d: usize) -> Vec<Vec<f64>> {
    assert!(n >= 1 && d >= 1);
    if d == 1 {
        return (0..n)
            .map(|i| {
                vec![if n == 1 {
                    0.0
                } else {
                    i as f64 / (n - 1) as f64
                }]
            })
            .collect();
    }
    let levels = (n as f64).powf(1.0 / d as f64).ceil() as usize;
    let levels = levels.max(2);
    let coord = |k: usize| k as f64 / (levels - 1) as f64;
    let mut points = Vec::with_capacity(n);
    let mut idx = vec![0usize; d];
    for _ in 0..n {
        points.push(idx.iter().map(|&k| coord(k)).collect());
        for axis in (0..d).rev() {
            idx[axis] += 1;
            if idx[axis] < levels {
                break;
            }
            idx[axis] = 0;
        }
    }
    points
}

/// Sample weights and node functions from their GP priors, then form
/// y = W f + sigma_f W eps + sigma_y z at every input. Deterministic given
/// the seed.
pub fn generate(
    shape: &NetworkShape,
    hyp: &Hyperparams,
    x: &[Vec<f64>],
    seed: u64,
) -> Result<SyntheticTruth> {
    hyp.validate(shape.q)?;
    if x.len() != shape.n || x.iter().any(|row| row.len() != shape.d) {
        return Err(GprnError::input(format!(
            "generate: inputs are {}x{}, shape wants {}x{}",
            x.len(),
            x.first().map(|r| r.len()).unwrap_or(0),
            shape.n,
            shape.d
        )));
    }
    // Noise-free node functions: the node noise is added explicitly below so
    // the signal stays separable from it.
    let noise_free = NoisyNodeKernel::new(hyp.node_kernel, 0.0)?;
    let prior = build_block_prior(&noise_free, &hyp.weight_kernel, x, shape.p, shape.q)?
        .with_node_scales(&hyp.ard)?;
    let mut rng = root_rng(seed);
    let u = prior.sample(&mut rng);
    let clean = unpack(&u, shape)?;
    let f_true = clean.fhat.clone();
    let w = clean.w.clone();

    let mut fhat = f_true.clone();
    let mut signal = DMatrix::zeros(shape.n, shape.p);
    let mut y = DMatrix::zeros(shape.n, shape.p);
    for r in 0..shape.n {
        let w_at = clean.weight_matrix_at(r);
        let f_at = DVector::from_fn(shape.q, |j, _| f_true[(r, j)]);
        let eps = DVector::from_fn(shape.q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = DVector::from_fn(shape.p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s = &w_at * &f_at;
        let noise = &w_at * &eps * hyp.sigma_f + z * hyp.sigma_y;
        for j in 0..shape.q {
            fhat[(r, j)] += hyp.sigma_f * eps[j];
        }
        for i in 0..shape.p {
            signal[(r, i)] = s[i];
            y[(r, i)] = s[i] + noise[i];
        }
    }
    let dataset = Dataset::fully_observed(x.to_vec(), y)?;
    Ok(SyntheticTruth {
        params: NetworkParams {
            fhat,
            w,
            p: shape.p,
            q: shape.q,
        },
        f_true,
        hyp: hyp.clone(),
        signal,
        dataset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelSpec;
    use crate::model::noise_covariance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hyp(q: usize, sigma_f: f64, sigma_y: f64) -> Hyperparams {
        Hyperparams::new(
            KernelSpec::squared_exponential(1.0, 0.4).unwrap(),
            KernelSpec::squared_exponential(1.0, 1.0).unwrap(),
            sigma_f,
            sigma_y,
            q,
        )
        .unwrap()
    }

    #[test]
    fn grid_is_deterministic_and_in_unit_box() {
        let g = grid_inputs(5, 1);
        assert_eq!(g[0], vec![0.0]);
        assert_eq!(g[4], vec![1.0]);
        assert_eq!(g, grid_inputs(5, 1));

        let g2 = grid_inputs(7, 2);
        assert_eq!(g2.len(), 7);
        assert!(g2.iter().all(|p| p.len() == 2 && p.iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn zero_noise_means_y_equals_signal() {
        let shape = NetworkShape::new(6, 2, 2, 1).unwrap();
        let mut h = hyp(2, 0.0, 1.0);
        h.sigma_y = 1e-300; // positive but negligible
        let truth = generate(&shape, &h, &grid_inputs(6, 1), 3).unwrap();
        let diff = (&truth.dataset.y - &truth.signal).norm();
        assert!(diff < 1e-280, "diff {diff}");
        assert_eq!(truth.f_true, truth.params.fhat);
    }

    #[test]
    fn generation_is_deterministic_given_seed() {
        let shape = NetworkShape::new(5, 2, 1, 1).unwrap();
        let h = hyp(1, 0.2, 0.1);
        let a = generate(&shape, &h, &grid_inputs(5, 1), 11).unwrap();
        let b = generate(&shape, &h, &grid_inputs(5, 1), 11).unwrap();
        assert_eq!(a.dataset.y, b.dataset.y);
        let c = generate(&shape, &h, &grid_inputs(5, 1), 12).unwrap();
        assert_ne!(a.dataset.y, c.dataset.y);
    }

    #[test]
    fn noise_covariance_monte_carlo_with_fixed_network() {
        // Fix W and f; resample only the noise and compare the empirical
        // covariance of y - signal against sigma_f^2 W W' + sigma_y^2 I.
        let (sigma_f, sigma_y) = (0.7, 0.3);
        let w = DMatrix::from_row_slice(3, 2, &[0.9, -0.4, 0.2, 1.1, -0.6, 0.5]);
        let target = noise_covariance(&w, sigma_f, sigma_y);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        let draws = 100_000;
        let mut acc = DMatrix::zeros(3, 3);
        for _ in 0..draws {
            let eps = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let z = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let noise = &w * eps * sigma_f + z * sigma_y;
            acc += &noise * noise.transpose();
        }
        acc /= draws as f64;
        let rel = (&acc - &target).norm() / target.norm();
        assert!(rel < 0.05, "relative error {rel}");
    }

    #[test]
    fn full_regeneration_second_moment_matches_mixing_kernel() {
        // Resampling W and f as well, E[y_i(x0)^2] should equal
        // sum_j k_w(x0,x0) [a_j k_f(x0,x0) + sigma_f^2] + sigma_y^2.
        let shape = NetworkShape::new(2, 2, 2, 1).unwrap();
        let h = hyp(2, 0.4, 0.25);
        let x = grid_inputs(2, 1);
        let expected = {
            let kw00 = h.weight_kernel.evaluate(&x[0], &x[0]).unwrap();
            let kf00 = h.node_kernel.evaluate(&x[0], &x[0]).unwrap();
            let per_node: f64 = h
                .ard
                .iter()
                .map(|a| kw00 * (a * kf00 + h.sigma_f * h.sigma_f))
                .sum();
            per_node + h.sigma_y * h.sigma_y
        };
        let reps = 100_000;
        let mut acc = 0.0;
        for seed in 0..reps {
            let truth = generate(&shape, &h, &x, seed).unwrap();
            acc += truth.dataset.y[(0, 0)] * truth.dataset.y[(0, 0)];
        }
        acc /= reps as f64;
        let rel = (acc - expected).abs() / expected;
        assert!(rel < 0.05, "empirical {acc}, expected {expected}");
    }

    #[test]
    fn low_rank_noise_structure_when_q_below_p() {
        // With q = 1 < p = 4, the noise covariance minus the ridge is rank 1:
        // its second eigenvalue should be far below the first.
        let (sigma_f, sigma_y) = (0.8, 0.1);
        let w = DMatrix::from_column_slice(4, 1, &[1.2, -0.7, 0.4, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        use rand::Rng;
        let draws = 200_000;
        let mut acc = DMatrix::zeros(4, 4);
        for _ in 0..draws {
            let eps = DVector::from_fn(1, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let z = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let noise = &w * eps * sigma_f + z * sigma_y;
            acc += &noise * noise.transpose();
        }
        acc /= draws as f64;
        for i in 0..4 {
            acc[(i, i)] -= sigma_y * sigma_y;
        }
        let mut eig: Vec<f64> = nalgebra::SymmetricEigen::new(acc).eigenvalues.iter().cloned().collect();
        eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(
            eig[1].abs() < 0.1 * eig[0],
            "eigenvalues {eig:?} not rank-1 dominated"
        );
    }

    #[test]
    fn truth_round_trips_through_json() {
        let shape = NetworkShape::new(4, 2, 1, 1).unwrap();
        let truth = generate(&shape, &hyp(1, 0.1, 0.1), &grid_inputs(4, 1), 9).unwrap();
        let json = serde_json::to_string(&truth).unwrap();
        let back: SyntheticTruth = serde_json::from_str(&json).unwrap();
        assert_eq!(back.signal, truth.signal);
        assert_eq!(back.params.fhat, truth.params.fhat);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let shape = NetworkShape::new(4, 2, 1, 1).unwrap();
        assert!(generate(&shape, &hyp(1, 0.1, 0.1), &grid_inputs(3, 1), 0).is_err());
        assert!(generate(&shape, &hyp(1, 0.1, 0.1), &grid_inputs(4, 2), 0).is_err());
    }
}
