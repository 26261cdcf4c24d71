//! Calibration of `alpha1` so that `E[alpha1 * g'(W)] = 1` with
//! `W = alpha1 * D + X1 + X2`.
//!
//! Expectations use Gauss-Hermite quadrature. When `(D, X)` is jointly
//! Gaussian, W is normal and one dimension suffices; otherwise the
//! expectation is taken over `(X1, X2, D_lin)` with a tensor rule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dgp::SigmaSpec;
use crate::numerics::{self, Matrix};

pub const DEFAULT_NODES: usize = 64;
pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_BRACKET: (f64, f64) = (1e-6, 4.0);
/// Upper limit for bracket expansion.
pub const MAX_ALPHA: f64 = 64.0;
pub const MAX_ITER: usize = 200;
/// The Hermite recurrence loses precision beyond this many nodes.
pub const MAX_NODES: usize = 150;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error(
        "no root of alpha * E[g'(W)] = 1 in ({lo}, {hi}); residual {r_lo:.3e} at lo and {r_hi:.3e} at hi. \
         Reduce the covariate variances or the treatment variance"
    )]
    NoRoot { lo: f64, hi: f64, r_lo: f64, r_hi: f64 },
    #[error("invalid calibration problem: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkModel {
    Probit,
    Exponential,
    Logit,
    LinearIdentity,
}

/// Derivative of the outcome link.
#[inline]
pub fn g_prime(model: LinkModel, w: f64) -> f64 {
    match model {
        LinkModel::Probit => numerics::normal_pdf(w),
        LinkModel::Exponential => w.exp(),
        LinkModel::Logit => {
            let p = numerics::logistic(w);
            p * (1.0 - p)
        }
        LinkModel::LinearIdentity => 1.0,
    }
}

/// Nodes and weights for `integral exp(-x^2) f(x) dx`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Newton iteration on the orthonormal Hermite recurrence.
    pub fn new(n: usize) -> Self {
        assert!((1..=MAX_NODES).contains(&n), "node count {n} outside 1..={MAX_NODES}");
        const PIM4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let m = n.div_ceil(2);
        let nf = n as f64;
        let mut z = 0.0;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let (mut p1, mut p2) = (PIM4, 0.0);
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        if n % 2 == 1 {
            x[m - 1] = 0.0;
        }
        Self { nodes: x, weights: w }
    }

    /// `E[f(W)]` for `W ~ N(mean, var)`.
    pub fn normal_expectation(&self, mean: f64, var: f64, f: impl Fn(f64) -> f64) -> f64 {
        let s = (2.0 * var).sqrt();
        let total: f64 = self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(mean + s * x)).sum();
        total / std::f64::consts::PI.sqrt()
    }
}

/// `E[g'(W)]` for `W ~ N(0, w_variance)`.
pub fn expected_gprime(model: LinkModel, w_variance: f64, quad_nodes: usize) -> f64 {
    if model == LinkModel::LinearIdentity {
        return 1.0;
    }
    gprime_expectation(&GaussHermite::new(quad_nodes), model, 0.0, w_variance)
}

/// `E[g'(W)]` for `W ~ N(mean, var)`, with the rule recentred at the mode of
/// `g'(w) p_W(w)` and scaled by its curvature. The integrand is then Gaussian
/// for Probit and Exponential and close to it for Logit, so accuracy does not
/// degrade when `var` is large relative to the width of `g'`.
fn gprime_expectation(rule: &GaussHermite, model: LinkModel, mean: f64, var: f64) -> f64 {
    if model == LinkModel::LinearIdentity {
        return 1.0;
    }
    if var <= 0.0 {
        return g_prime(model, mean);
    }
    let (center, precision) = match model {
        LinkModel::Probit => (mean / (1.0 + var), 1.0 / var + 1.0),
        LinkModel::Exponential => (mean + var, 1.0 / var),
        LinkModel::Logit => {
            // log g' is concave, so Newton on the log integrand converges.
            let mut w = mean / (1.0 + 0.5 * var);
            let mut curv = 1.0 / var + 0.5;
            for _ in 0..50 {
                let p = numerics::logistic(w);
                let grad = -(w - mean) / var + 1.0 - 2.0 * p;
                curv = 1.0 / var + 2.0 * p * (1.0 - p);
                let step = grad / curv;
                w += step;
                if step.abs() < 1e-14 * w.abs().max(1.0) {
                    break;
                }
            }
            (w, curv)
        }
        LinkModel::LinearIdentity => unreachable!(),
    };
    let scale = (2.0 / precision).sqrt();
    let density = |w: f64| (-(w - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
    let total: f64 = rule
        .nodes
        .iter()
        .zip(&rule.weights)
        .map(|(t, wt)| {
            let w = center + scale * t;
            wt * (t * t).exp() * g_prime(model, w) * density(w)
        })
        .sum();
    scale * total
}

/// `Var(alpha * D + X1 + X2)` under `sigma`.
pub fn w_variance(sigma: &SigmaSpec, alpha: f64) -> f64 {
    alpha * alpha * sigma.sigma_d2 + 4.0 * sigma.rho * alpha + sigma.sigma_x1_2 + sigma.sigma_x2_2 + 2.0 * sigma.rho
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationProblem {
    pub model: LinkModel,
    pub sigma: SigmaSpec,
    pub tolerance: f64,
    pub bracket: (f64, f64),
    pub quad_nodes: usize,
}

impl CalibrationProblem {
    pub fn new(model: LinkModel, sigma: SigmaSpec) -> Self {
        Self { model, sigma, tolerance: DEFAULT_TOLERANCE, bracket: DEFAULT_BRACKET, quad_nodes: DEFAULT_NODES }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub alpha1: f64,
    /// `alpha1 * E[g'(W)] - 1`.
    pub residual: f64,
    /// `(alpha1 - 1 / E[g'(W)])^2`.
    pub objective: f64,
    pub expected_gprime: f64,
    pub iterations: usize,
}

/// Evaluates `E[g'(alpha D + X1 + X2)]` under the simulated law of `(D, X)`.
pub struct ApeIntegrator {
    model: LinkModel,
    sigma: SigmaSpec,
    rule: GaussHermite,
    // Cholesky factor of Cov(X1, X2).
    lxx: [f64; 3],
    // E[D_lin | X] = b'X and its residual sd.
    b: [f64; 2],
    s: f64,
}

impl ApeIntegrator {
    pub fn new(model: LinkModel, sigma: SigmaSpec, nodes: usize) -> Result<Self, CalibrationError> {
        sigma.validate().map_err(|e| CalibrationError::Invalid(e.to_string()))?;
        if !(1..=MAX_NODES).contains(&nodes) {
            return Err(CalibrationError::Invalid(format!("quad_nodes must be in 1..={MAX_NODES}")));
        }
        let sxx = Matrix::new(2, 2, vec![sigma.sigma_x1_2, sigma.rho, sigma.rho, sigma.sigma_x2_2])
            .map_err(|e| CalibrationError::Invalid(e.to_string()))?;
        let l = numerics::cholesky(&sxx).map_err(|e| CalibrationError::Invalid(e.to_string()))?;
        let b = numerics::QrFactorization::new(&sxx)
            .and_then(|qr| qr.solve(&[sigma.rho, sigma.rho]))
            .map_err(|e| CalibrationError::Invalid(e.to_string()))?;
        let s2 = sigma.var_d_lin() - sigma.rho * (b[0] + b[1]);
        Ok(Self {
            model,
            sigma,
            rule: GaussHermite::new(nodes),
            lxx: [l.get(0, 0), l.get(1, 0), l.get(1, 1)],
            b: [b[0], b[1]],
            s: s2.max(0.0).sqrt(),
        })
    }

    pub fn expected_gprime(&self, alpha: f64) -> f64 {
        let model = self.model;
        if model == LinkModel::LinearIdentity {
            return 1.0;
        }
        if self.sigma.kappa == 0.0 {
            return gprime_expectation(&self.rule, model, 0.0, w_variance(&self.sigma, alpha));
        }
        let (k, rho) = (self.sigma.kappa, self.sigma.rho);
        let r2 = std::f64::consts::SQRT_2;
        let inner_var = alpha * alpha * self.s * self.s;
        let mut total = 0.0;
        for (t1, w1) in self.rule.nodes.iter().zip(&self.rule.weights) {
            let u1 = r2 * t1;
            for (t2, w2) in self.rule.nodes.iter().zip(&self.rule.weights) {
                let u2 = r2 * t2;
                let x1 = self.lxx[0] * u1;
                let x2 = self.lxx[1] * u1 + self.lxx[2] * u2;
                let mu = alpha * (self.b[0] * x1 + self.b[1] * x2 + k * (x1 * x2 - rho)) + x1 + x2;
                let inner = gprime_expectation(&self.rule, model, mu, inner_var);
                total += w1 * w2 * inner;
            }
        }
        total / std::f64::consts::PI
    }
}

/// Bisection on `r(a) = a * E[g'(W(a))] - 1`, expanding the upper end of the
/// bracket by doubling up to [`MAX_ALPHA`].
pub fn calibrate_alpha(problem: &CalibrationProblem) -> Result<CalibrationResult, CalibrationError> {
    let (mut lo, mut hi) = problem.bracket;
    if !(lo > 0.0 && hi > lo) {
        return Err(CalibrationError::Invalid(format!("bracket ({lo}, {hi}) must satisfy 0 < lo < hi")));
    }
    if !(problem.tolerance > 0.0) || !(1..=MAX_NODES).contains(&problem.quad_nodes) {
        return Err(CalibrationError::Invalid(format!("tolerance must be positive and quad_nodes in 1..={MAX_NODES}")));
    }
    let ape = ApeIntegrator::new(problem.model, problem.sigma, problem.quad_nodes)?;
    let r = |a: f64| a * ape.expected_gprime(a) - 1.0;
    let finish = |a: f64, iterations: usize| {
        let e = ape.expected_gprime(a);
        CalibrationResult { alpha1: a, residual: a * e - 1.0, objective: (a - 1.0 / e).powi(2), expected_gprime: e, iterations }
    };

    let r_lo = r(lo);
    if r_lo.abs() < problem.tolerance {
        return Ok(finish(lo, 0));
    }
    let mut r_hi = r(hi);
    while r_lo.signum() == r_hi.signum() && hi < MAX_ALPHA {
        lo = hi;
        hi = (2.0 * hi).min(MAX_ALPHA);
        r_hi = r(hi);
    }
    if r_lo.signum() == r_hi.signum() || !r_hi.is_finite() {
        return Err(CalibrationError::NoRoot { lo: problem.bracket.0, hi, r_lo, r_hi });
    }
    let mut r_lo = r(lo);
    for it in 1..=MAX_ITER {
        let mid = 0.5 * (lo + hi);
        let r_mid = r(mid);
        if r_mid.abs() < problem.tolerance || (hi - lo) <= f64::EPSILON * mid {
            return Ok(finish(mid, it));
        }
        if r_mid.signum() == r_lo.signum() {
            lo = mid;
            r_lo = r_mid;
        } else {
            hi = mid;
        }
    }
    Ok(finish(0.5 * (lo + hi), MAX_ITER))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(kappa: f64) -> SigmaSpec {
        SigmaSpec { kappa, ..SigmaSpec::semisynth() }
    }

    #[test]
    fn rule_integrates_low_moments() {
        let gh = GaussHermite::new(64);
        let pi_sqrt = std::f64::consts::PI.sqrt();
        let s0: f64 = gh.weights.iter().sum();
        let s2: f64 = gh.nodes.iter().zip(&gh.weights).map(|(x, w)| w * x * x).sum();
        assert!((s0 - pi_sqrt).abs() < 1e-13);
        assert!((s2 - pi_sqrt / 2.0).abs() < 1e-13);
        let odd = GaussHermite::new(5);
        assert_eq!(odd.nodes[2], 0.0);
        // 4th moment of N(0, 3) is 27.
        assert!((odd.normal_expectation(0.0, 3.0, |w| w.powi(4)) - 27.0).abs() < 1e-11);
    }

    #[test]
    fn linear_identity_is_one() {
        assert_eq!(expected_gprime(LinkModel::LinearIdentity, 7.0, 64), 1.0);
        let r = calibrate_alpha(&CalibrationProblem::new(LinkModel::LinearIdentity, gaussian(0.0))).unwrap();
        assert!((r.alpha1 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn exponential_matches_lognormal_mean() {
        for v in [0.5, 2.0, 5.0] {
            let e = expected_gprime(LinkModel::Exponential, v, 64);
            assert!((e - (v / 2.0f64).exp()).abs() < 1e-10, "{v}: {e}");
        }
    }

    #[test]
    fn probit_matches_convolution() {
        for v in [0.5, 2.0, 5.0] {
            let e = expected_gprime(LinkModel::Probit, v, 64);
            let exact = 1.0 / (2.0 * std::f64::consts::PI * (v + 1.0)).sqrt();
            assert!((e - exact).abs() < 1e-8, "{v}: {e} vs {exact}");
        }
    }

    #[test]
    fn probit_root_matches_independent_bisection() {
        // Oracle: bisection on a * phi-convolution closed form.
        let s = gaussian(0.0);
        let f = |a: f64| a / (2.0 * std::f64::consts::PI * (w_variance(&s, a) + 1.0)).sqrt() - 1.0;
        let (mut lo, mut hi) = (1e-6, 64.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let r = calibrate_alpha(&CalibrationProblem::new(LinkModel::Probit, s)).unwrap();
        assert!((r.alpha1 - lo).abs() < 1e-6, "{} vs {lo}", r.alpha1);
        assert!(r.residual.abs() < 1e-8);
        assert!(r.objective < 1e-12);
        assert!(r.iterations <= MAX_ITER);
    }

    #[test]
    fn probit_default_sigma_has_no_root() {
        let err = calibrate_alpha(&CalibrationProblem::new(LinkModel::Probit, SigmaSpec::default()));
        assert!(matches!(err, Err(CalibrationError::NoRoot { .. })));
    }

    #[test]
    fn exponential_stress_case() {
        let wide = SigmaSpec { sigma_x1_2: 25.0, sigma_x2_2: 25.0, kappa: 0.0, ..SigmaSpec::semisynth() };
        assert!(matches!(
            calibrate_alpha(&CalibrationProblem::new(LinkModel::Exponential, wide)),
            Err(CalibrationError::NoRoot { .. })
        ));
        let r = calibrate_alpha(&CalibrationProblem::new(LinkModel::Exponential, gaussian(0.0))).unwrap();
        let exact = r.alpha1 * (w_variance(&gaussian(0.0), r.alpha1) / 2.0).exp() - 1.0;
        assert!(exact.abs() < 1e-8);
    }

    #[test]
    fn tensor_rule_reduces_to_closed_form_at_zero_kappa() {
        // The 3-D rule applied with a tiny kappa must agree with the 1-D law.
        let s = gaussian(1e-12);
        let ape = ApeIntegrator::new(LinkModel::Probit, s, 40).unwrap();
        let a = 0.7;
        let exact = 1.0 / (2.0 * std::f64::consts::PI * (w_variance(&s, a) + 1.0)).sqrt();
        assert!((ape.expected_gprime(a) - exact).abs() < 1e-10);
    }

    #[test]
    fn bad_bracket_is_rejected() {
        let mut p = CalibrationProblem::new(LinkModel::Logit, gaussian(0.0));
        p.bracket = (2.0, 1.0);
        assert!(matches!(calibrate_alpha(&p), Err(CalibrationError::Invalid(_))));
        let mut p = CalibrationProblem::new(LinkModel::Logit, gaussian(0.0));
        p.quad_nodes = MAX_NODES + 1;
        assert!(matches!(calibrate_alpha(&p), Err(CalibrationError::Invalid(_))));
    }

    #[test]
    fn probit_is_accurate_at_large_variance() {
        for v in [20.0, 200.0, 2000.0] {
            let exact = 1.0 / (2.0 * std::f64::consts::PI * (v + 1.0)).sqrt();
            let e = expected_gprime(LinkModel::Probit, v, 16);
            assert!((e - exact).abs() < 1e-14, "{v}: {e} vs {exact}");
        }
    }
}
