//! Covariance functions, Gram matrices, and the noisy-node transformation.
//!
//! Three stationary families are provided: squared exponential, Ornstein-
//! Uhlenbeck, and Matern with general smoothness. Node functions carry extra
//! white noise on the diagonal via [`NoisyNodeKernel`], which folds the node
//! noise variance into the kernel so downstream code never has to represent
//! that noise explicitly.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GprnError, Result};

/// Stationary covariance family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KernelFamily {
    SquaredExponential,
    OrnsteinUhlenbeck,
    /// Matern with smoothness `matern_alpha`; recovers OU at alpha = 1/2.
    Matern,
}

/// A covariance function with amplitude and length-scale hyperparameters.
///
/// `amplitude` is the prior marginal variance k(x, x); `length_scale` is in
/// input units. Values are validated at construction and immutable afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub amplitude: f64,
    pub length_scale: f64,
    /// Smoothness parameter, only meaningful for the Matern family.
    pub matern_alpha: f64,
}

impl KernelSpec {
    pub fn squared_exponential(amplitude: f64, length_scale: f64) -> Result<Self> {
        Self::new(KernelFamily::SquaredExponential, amplitude, length_scale, 1.0)
    }

    pub fn ornstein_uhlenbeck(amplitude: f64, length_scale: f64) -> Result<Self> {
        Self::new(KernelFamily::OrnsteinUhlenbeck, amplitude, length_scale, 0.5)
    }

    pub fn matern(alpha: f64, amplitude: f64, length_scale: f64) -> Result<Self> {
        Self::new(KernelFamily::Matern, amplitude, length_scale, alpha)
    }

    fn new(family: KernelFamily, amplitude: f64, length_scale: f64, alpha: f64) -> Result<Self> {
        if !(amplitude > 0.0 && amplitude.is_finite()) {
            return Err(GprnError::input(format!(
                "kernel amplitude must be positive and finite, got {amplitude}"
            )));
        }
        if !(length_scale > 0.0 && length_scale.is_finite()) {
            return Err(GprnError::input(format!(
                "kernel length-scale must be positive and finite, got {length_scale}"
            )));
        }
        if family == KernelFamily::Matern && !(alpha > 0.0 && alpha.is_finite()) {
            return Err(GprnError::input(format!(
                "matern alpha must be positive and finite, got {alpha}"
            )));
        }
        Ok(KernelSpec {
            family,
            amplitude,
            length_scale,
            matern_alpha: alpha,
        })
    }

    /// Same kernel with the amplitude multiplied by `factor` (ARD scaling).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.family,
            self.amplitude * factor,
            self.length_scale,
            self.matern_alpha,
        )
    }

    /// Same kernel with a different length-scale.
    pub fn with_length_scale(&self, length_scale: f64) -> Result<Self> {
        Self::new(self.family, self.amplitude, length_scale, self.matern_alpha)
    }

    /// Evaluate k(x, x') for same-dimension input points.
    pub fn evaluate(&self, x: &[f64], x_prime: &[f64]) -> Result<f64> {
        let r = distance(x, x_prime)?;
        Ok(self.evaluate_dist(r))
    }

    /// Evaluate from the Euclidean distance r = ||x - x'||.
    pub fn evaluate_dist(&self, r: f64) -> f64 {
        let l = self.length_scale;
        let a = self.amplitude;
        match self.family {
            KernelFamily::SquaredExponential => a * (-0.5 * (r / l).powi(2)).exp(),
            KernelFamily::OrnsteinUhlenbeck => a * (-r / l).exp(),
            KernelFamily::Matern => a * matern_unit(self.matern_alpha, r / l),
        }
    }

    /// Derivative of k(x, x') with respect to log length-scale, from distance.
    ///
    /// Needed by the variational M-step; zero at r = 0 for every family.
    pub fn grad_log_length_scale_dist(&self, r: f64) -> f64 {
        if r == 0.0 {
            return 0.0;
        }
        let l = self.length_scale;
        let a = self.amplitude;
        match self.family {
            KernelFamily::SquaredExponential => self.evaluate_dist(r) * (r / l).powi(2),
            KernelFamily::OrnsteinUhlenbeck => self.evaluate_dist(r) * (r / l),
            KernelFamily::Matern => a * matern_unit_grad_log_l(self.matern_alpha, r / l),
        }
    }

    /// N x N Gram matrix over a list of input points.
    pub fn gram(&self, points: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        self.build_matrix(points, |r| self.evaluate_dist(r))
    }

    /// Elementwise derivative of the Gram matrix w.r.t. log length-scale.
    pub fn gram_grad_log_length_scale(&self, points: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        self.build_matrix(points, |r| self.grad_log_length_scale_dist(r))
    }

    /// Cross-covariance column (k(x_i, x_star))_i.
    pub fn cross(&self, points: &[Vec<f64>], x_star: &[f64]) -> Result<Vec<f64>> {
        points
            .iter()
            .map(|x| self.evaluate(x, x_star))
            .collect::<Result<Vec<_>>>()
    }

    fn build_matrix<F: Fn(f64) -> f64>(
        &self,
        points: &[Vec<f64>],
        f: F,
    ) -> Result<DMatrix<f64>> {
        let n = points.len();
        if n == 0 {
            return Err(GprnError::input("gram matrix needs at least one point"));
        }
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = f(0.0);
            for j in 0..i {
                let r = distance(&points[i], &points[j])?;
                let v = f(r);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Ok(m)
    }
}

/// A base kernel plus independent per-evaluation noise on the node functions.
///
/// The delta is on index equality within a Gram matrix, so duplicated input
/// locations still receive independent noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyNodeKernel {
    pub base: KernelSpec,
    pub sigma_f: f64,
}

impl NoisyNodeKernel {
    pub fn new(base: KernelSpec, sigma_f: f64) -> Result<Self> {
        if !(sigma_f >= 0.0 && sigma_f.is_finite()) {
            return Err(GprnError::input(format!(
                "node noise sigma_f must be nonnegative and finite, got {sigma_f}"
            )));
        }
        Ok(NoisyNodeKernel { base, sigma_f })
    }

    /// Gram of the base kernel with sigma_f^2 added on the diagonal only.
    pub fn gram(&self, points: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let mut m = self.base.gram(points)?;
        let s2 = self.sigma_f * self.sigma_f;
        for i in 0..m.nrows() {
            m[(i, i)] += s2;
        }
        Ok(m)
    }
}

fn distance(x: &[f64], x_prime: &[f64]) -> Result<f64> {
    if x.len() != x_prime.len() {
        return Err(GprnError::input(format!(
            "input dimension mismatch: {} vs {}",
            x.len(),
            x_prime.len()
        )));
    }
    let mut s = 0.0;
    for (a, b) in x.iter().zip(x_prime.iter()) {
        if !a.is_finite() || !b.is_finite() {
            return Err(GprnError::input("non-finite input point"));
        }
        s += (a - b) * (a - b);
    }
    Ok(s.sqrt())
}

/// Unit-amplitude Matern correlation at scaled distance u = r / l.
fn matern_unit(alpha: f64, u: f64) -> f64 {
    if u == 0.0 {
        return 1.0;
    }
    let s = (2.0 * alpha).sqrt() * u;
    // Closed forms for the common half-integer orders.
    if (alpha - 0.5).abs() < 1e-12 {
        return (-s).exp();
    }
    if (alpha - 1.5).abs() < 1e-12 {
        return (1.0 + s) * (-s).exp();
    }
    if (alpha - 2.5).abs() < 1e-12 {
        return (1.0 + s + s * s / 3.0) * (-s).exp();
    }
    matern_general(alpha, s)
}

fn matern_general(alpha: f64, s: f64) -> f64 {
    let ln_coef = (1.0 - alpha) * std::f64::consts::LN_2
        - statrs::function::gamma::ln_gamma(alpha)
        + alpha * s.ln();
    ln_coef.exp() * bessel_k(alpha, s)
}

/// d/d(log l) of the unit-amplitude Matern at u = r / l.
///
/// Uses d/ds [s^a K_a(s)] = -s^a K_{a-1}(s) and ds/d(log l) = -s, giving
/// 2^{1-a}/Gamma(a) * s^{a+1} K_{a-1}(s).
fn matern_unit_grad_log_l(alpha: f64, u: f64) -> f64 {
    if u == 0.0 {
        return 0.0;
    }
    let s = (2.0 * alpha).sqrt() * u;
    if (alpha - 0.5).abs() < 1e-12 {
        return s * (-s).exp();
    }
    if (alpha - 1.5).abs() < 1e-12 {
        return s * s * (-s).exp();
    }
    if (alpha - 2.5).abs() < 1e-12 {
        return s * s * (1.0 + s) / 3.0 * (-s).exp();
    }
    let ln_coef = (1.0 - alpha) * std::f64::consts::LN_2
        - statrs::function::gamma::ln_gamma(alpha)
        + (alpha + 1.0) * s.ln();
    ln_coef.exp() * bessel_k((alpha - 1.0).abs(), s)
}

/// Modified Bessel function of the second kind K_nu(x) for real nu >= 0, x > 0.
///
/// Temme's series below x = 2 and Steed's continued fraction above, followed
/// by upward recurrence in the order. Half-integer orders hit the Matern
/// closed forms before reaching this routine, but the implementation handles
/// them as well.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    assert!(nu >= 0.0 && x > 0.0, "bessel_k domain: nu >= 0, x > 0");
    const EPS: f64 = 1e-16;
    const MAX_ITER: usize = 10_000;
    let nl = (nu + 0.5).floor() as usize;
    let mu = nu - nl as f64; // in [-0.5, 0.5)
    let mu2 = mu * mu;
    let xi = 1.0 / x;

    let (mut k_mu, mut k_mu1);
    if x < 2.0 {
        // Temme series for K_mu and K_{mu+1}.
        let x2 = 0.5 * x;
        let pimu = std::f64::consts::PI * mu;
        let fact = if pimu.abs() < EPS { 1.0 } else { pimu / pimu.sin() };
        let d = -x2.ln();
        let e = mu * d;
        let fact2 = if e.abs() < EPS { 1.0 } else { e.sinh() / e };
        let (gam1, gam2, gampl, gammi) = temme_gammas(mu);
        let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
        let mut sum = ff;
        let e_exp = e.exp();
        let mut p = 0.5 * e_exp / gampl;
        let mut q = 0.5 / (e_exp * gammi);
        let mut c = 1.0;
        let dd = x2 * x2;
        let mut sum1 = p;
        let mut converged = false;
        for i in 1..=MAX_ITER {
            let fi = i as f64;
            ff = (fi * ff + p + q) / (fi * fi - mu2);
            c *= dd / fi;
            p /= fi - mu;
            q /= fi + mu;
            let del = c * ff;
            sum += del;
            let del1 = c * (p - fi * ff);
            sum1 += del1;
            if del.abs() < sum.abs() * EPS {
                converged = true;
                break;
            }
        }
        debug_assert!(converged, "bessel_k series did not converge");
        k_mu = sum;
        k_mu1 = sum1 * 2.0 * xi;
    } else {
        // Steed's continued fraction CF2.
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut h = d;
        let mut delh = d;
        let mut q1 = 0.0;
        let mut q2 = 1.0;
        let a1 = 0.25 - mu2;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        for i in 2..=MAX_ITER {
            let fi = i as f64;
            a -= 2.0 * (fi - 1.0);
            c = -a * c / fi;
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh = (b * d - 1.0) * delh;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < EPS {
                break;
            }
        }
        h = a1 * h;
        k_mu = (std::f64::consts::PI / (2.0 * x)).sqrt() * (-x).exp() / s;
        k_mu1 = k_mu * (mu + x + 0.5 - h) * xi;
    }

    // Upward recurrence K_{v+1} = (2v/x) K_v + K_{v-1}.
    let mut v = mu;
    for _ in 0..nl {
        v += 1.0;
        let k_next = 2.0 * v * xi * k_mu1 + k_mu;
        k_mu = k_mu1;
        k_mu1 = k_next;
    }
    k_mu
}

/// Gamma-derived coefficients for the Temme series:
/// gam1 = (1/Gamma(1-mu) - 1/Gamma(1+mu)) / (2 mu), its mu -> 0 limit being
/// -EulerGamma; gam2 = (1/Gamma(1-mu) + 1/Gamma(1+mu)) / 2.
fn temme_gammas(mu: f64) -> (f64, f64, f64, f64) {
    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
    let gampl = 1.0 / statrs::function::gamma::gamma(1.0 + mu);
    let gammi = 1.0 / statrs::function::gamma::gamma(1.0 - mu);
    let gam1 = if mu.abs() < 1e-6 {
        -EULER_GAMMA
    } else {
        (gammi - gampl) / (2.0 * mu)
    };
    let gam2 = 0.5 * (gammi + gampl);
    (gam1, gam2, gampl, gammi)
}

/// Format a kernel as its config string with 17 significant digits, so that
/// parse(format(k)) round-trips bit-exactly.
pub fn format_kernel(k: &KernelSpec) -> String {
    match k.family {
        KernelFamily::SquaredExponential => {
            format!("se({},{})", fmt17(k.amplitude), fmt17(k.length_scale))
        }
        KernelFamily::OrnsteinUhlenbeck => {
            format!("ou({},{})", fmt17(k.amplitude), fmt17(k.length_scale))
        }
        KernelFamily::Matern => format!(
            "matern({},{},{})",
            fmt17(k.matern_alpha),
            fmt17(k.amplitude),
            fmt17(k.length_scale)
        ),
    }
}

pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Parse a kernel specification string: `se(A,l)`, `ou(A,l)`,
/// `matern(alpha,A,l)`.
pub fn parse_kernel(s: &str) -> Result<KernelSpec> {
    let s = s.trim();
    let open = s
        .find('(')
        .ok_or_else(|| GprnError::parse("kernel string", format!("missing '(' in '{s}'")))?;
    if !s.ends_with(')') {
        return Err(GprnError::parse(
            "kernel string",
            format!("missing ')' in '{s}'"),
        ));
    }
    let name = s[..open].trim().to_ascii_lowercase();
    let args: Vec<f64> = s[open + 1..s.len() - 1]
        .split(',')
        .map(|tok| {
            tok.trim().parse::<f64>().map_err(|_| {
                GprnError::parse("kernel string", format!("invalid number '{}'", tok.trim()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    match (name.as_str(), args.as_slice()) {
        ("se", [a, l]) => KernelSpec::squared_exponential(*a, *l),
        ("ou", [a, l]) => KernelSpec::ornstein_uhlenbeck(*a, *l),
        ("matern", [alpha, a, l]) => KernelSpec::matern(*alpha, *a, *l),
        ("se", _) | ("ou", _) => Err(GprnError::parse(
            "kernel string",
            format!("'{name}' takes 2 arguments, got {}", args.len()),
        )),
        ("matern", _) => Err(GprnError::parse(
            "kernel string",
            format!("'matern' takes 3 arguments, got {}", args.len()),
        )),
        _ => Err(GprnError::parse(
            "kernel string",
            format!("unknown kernel family '{name}'"),
        )),
    }
}
