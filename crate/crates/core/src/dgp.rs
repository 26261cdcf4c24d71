//! Data-generating processes: linear-with-interaction, adversarial, the
//! probit/exponential/logit/log-linear semi-synthetic models, and an
//! excluded-instrument benchmark.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{self, CalibrationError, CalibrationProblem, LinkModel};
use crate::data_model::{DataError, Dataset};
use crate::instruments::{self, InstrumentSpec};
use crate::numerics::{self, Matrix, NumericsError};

/// Default pilot size for plug-in population moments.
pub const PILOT_N: usize = 1_000_000;
/// Seed for pilot draws; evaluation seeds come from the replication mixer.
pub const PILOT_SEED: u64 = 0x9E37_79B9_7F4A_7C15;
/// Conditioning warning threshold for the adversarial fit.
pub const CONDITIONING_TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum DgpError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("covariance matrix is not positive definite")]
    NonPositiveDefinite,
    #[error("adversarial instrument is degenerate on the pilot sample")]
    Unidentified,
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Instrument(#[from] instruments::InstrumentError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Second moments of `(D, X1, X2, eps)`.
///
/// `kappa` moves part of the treatment onto `X1 * X2 - rho`; the linear part
/// of D is shrunk so that the covariance of `(D, X1, X2, eps)` is unchanged.
/// `kappa = 0` gives a jointly Gaussian `(D, X)`, under which no function of X
/// is a relevant instrument.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SigmaSpec {
    pub sigma_d2: f64,
    pub sigma_x1_2: f64,
    pub sigma_x2_2: f64,
    pub rho: f64,
    pub sigma_eps2: f64,
    pub kappa: f64,
}

impl Default for SigmaSpec {
    fn default() -> Self {
        Self { sigma_d2: 1.0, sigma_x1_2: 1.0, sigma_x2_2: 1.0, rho: 0.3, sigma_eps2: 1.0, kappa: 0.6 }
    }
}

impl SigmaSpec {
    /// Scales used for the semi-synthetic models, where the calibration needs
    /// a treatment that is not too dispersed relative to the covariates.
    pub fn semisynth() -> Self {
        Self { sigma_d2: 0.1, sigma_x1_2: 1.0, sigma_x2_2: 1.0, rho: 0.1, sigma_eps2: 1.0, kappa: 0.2 }
    }

    /// `Var(X1 * X2)` for centered Gaussian `(X1, X2)`.
    pub fn var_x1x2(&self) -> f64 {
        self.sigma_x1_2 * self.sigma_x2_2 + self.rho * self.rho
    }

    /// Variance of the Gaussian part of D.
    pub fn var_d_lin(&self) -> f64 {
        self.sigma_d2 - self.kappa * self.kappa * self.var_x1x2()
    }

    /// Covariance of `(D_lin, X1, X2, eps)`.
    pub fn latent_cov(&self) -> Matrix {
        let r = self.rho;
        Matrix::new(
            4,
            4,
            vec![
                self.var_d_lin(), r, r, 0.0,
                r, self.sigma_x1_2, r, 0.0,
                r, r, self.sigma_x2_2, 0.0,
                0.0, 0.0, 0.0, self.sigma_eps2,
            ],
        )
        .expect("finite entries")
    }

    pub fn validate(&self) -> Result<(), DgpError> {
        let vals = [self.sigma_d2, self.sigma_x1_2, self.sigma_x2_2, self.rho, self.sigma_eps2, self.kappa];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(DgpError::InvalidSpec("sigma has non-finite entries".into()));
        }
        if self.sigma_d2 <= 0.0 || self.sigma_x1_2 <= 0.0 || self.sigma_x2_2 <= 0.0 || self.sigma_eps2 <= 0.0 {
            return Err(DgpError::InvalidSpec("variances must be positive".into()));
        }
        numerics::cholesky(&self.latent_cov()).map_err(|_| DgpError::NonPositiveDefinite)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearSpec {
    pub alpha: f64,
    pub theta: f64,
    pub pi1: f64,
    pub pi2: f64,
    pub rho_interact: f64,
    pub sigma: SigmaSpec,
}

impl Default for LinearSpec {
    fn default() -> Self {
        Self { alpha: 1.0, theta: 1.0, pi1: 1.0, pi2: 1.0, rho_interact: 0.0, sigma: SigmaSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdversarialSpec {
    pub alpha: f64,
    pub theta: f64,
    pub pi: Vec<f64>,
    pub rho_target: f64,
    pub instrument: InstrumentSpec,
    pub sigma: SigmaSpec,
    pub pilot_n: usize,
    pub pilot_seed: u64,
}

impl Default for AdversarialSpec {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            theta: 1.0,
            pi: vec![1.0, 1.0],
            rho_target: 0.0,
            instrument: InstrumentSpec::product(),
            sigma: SigmaSpec::default(),
            pilot_n: PILOT_N,
            pilot_seed: PILOT_SEED,
        }
    }
}

/// Binary-choice or exponential outcome in `W = alpha1 * D + X1 + X2`.
/// `alpha1 = None` means calibrate so that the average partial effect is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkSpec {
    pub alpha1: Option<f64>,
    pub sigma: SigmaSpec,
}

impl Default for LinkSpec {
    fn default() -> Self {
        Self { alpha1: None, sigma: SigmaSpec::semisynth() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogLinearSpec {
    pub pi1: f64,
    pub pi2: f64,
    pub gamma_mean: f64,
    pub gamma_var: f64,
    pub rho_latent: f64,
    pub sigma_d2: f64,
    pub sigma_eps2: f64,
}

impl Default for LogLinearSpec {
    fn default() -> Self {
        Self { pi1: 1.0, pi2: 1.0, gamma_mean: 2.0, gamma_var: 1.0, rho_latent: 0.3, sigma_d2: 1.0, sigma_eps2: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExcludedSpec {
    pub alpha: f64,
    pub theta: f64,
    pub pi1: f64,
    pub pi2: f64,
    pub rho_interact: f64,
    pub gamma_z: f64,
    pub endog_corr: f64,
    pub sigma: SigmaSpec,
}

impl Default for ExcludedSpec {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            theta: 1.0,
            pi1: 1.0,
            pi2: 1.0,
            rho_interact: 0.0,
            gamma_z: 1.0,
            endog_corr: 0.5,
            sigma: SigmaSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum DgpSpec {
    LinearInteraction(LinearSpec),
    Adversarial(AdversarialSpec),
    Probit(LinkSpec),
    Exponential(LinkSpec),
    Logit(LinkSpec),
    LogLinear(LogLinearSpec),
    ExcludedInstrument(ExcludedSpec),
}

impl DgpSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DgpSpec::LinearInteraction(_) => "linear_interaction",
            DgpSpec::Adversarial(_) => "adversarial",
            DgpSpec::Probit(_) => "probit",
            DgpSpec::Exponential(_) => "exponential",
            DgpSpec::Logit(_) => "logit",
            DgpSpec::LogLinear(_) => "log_linear",
            DgpSpec::ExcludedInstrument(_) => "excluded_instrument",
        }
    }

    pub fn link(&self) -> Option<(LinkModel, &LinkSpec)> {
        match self {
            DgpSpec::Probit(s) => Some((LinkModel::Probit, s)),
            DgpSpec::Exponential(s) => Some((LinkModel::Exponential, s)),
            DgpSpec::Logit(s) => Some((LinkModel::Logit, s)),
            _ => None,
        }
    }

    /// Copy with the outcome interaction coefficient replaced. Only the
    /// linear and excluded-instrument variants carry one.
    pub fn with_rho_interact(&self, rho: f64) -> Option<DgpSpec> {
        match self {
            DgpSpec::LinearInteraction(s) => Some(DgpSpec::LinearInteraction(LinearSpec { rho_interact: rho, ..s.clone() })),
            DgpSpec::ExcludedInstrument(s) => {
                Some(DgpSpec::ExcludedInstrument(ExcludedSpec { rho_interact: rho, ..s.clone() }))
            }
            _ => None,
        }
    }

    /// Whether the simulated dataset carries a z column.
    pub fn has_excluded(&self) -> bool {
        matches!(self, DgpSpec::ExcludedInstrument(_))
    }
}

/// Fixed outcome nonlinearity `h(X) = X pi + g * f(X)` that targets a given
/// IV bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialModel {
    pub g_rho: f64,
    pub pi: Vec<f64>,
    pub instrument: InstrumentSpec,
    /// Coefficients of the instrument on `(1, X)` in the pilot.
    pub projection: Vec<f64>,
    pub cov_dfperp: f64,
    pub var_fperp: f64,
    pub conditioning_warning: bool,
}

/// Constructs `g = -rho_target * Cov(D, f_perp) / Var(f_perp)` from a pilot
/// sample, so that `theta - theta_IV = rho_target`.
pub fn fit_adversarial(
    rho_target: f64,
    pi: &[f64],
    instrument: &InstrumentSpec,
    pilot: &Dataset,
) -> Result<AdversarialModel, DgpError> {
    if pi.len() != pilot.x().cols() {
        return Err(DgpError::InvalidSpec(format!("pi has {} entries, X has {} columns", pi.len(), pilot.x().cols())));
    }
    let f = instruments::build_instrument(instrument, pilot)?;
    let design = pilot.x().with_intercept();
    let projection = numerics::solve_least_squares(&design, &f)?;
    let fitted = design.mul_vec(&projection)?;
    let f_perp: Vec<f64> = f.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let sat = instruments::saturation_from_residual(&f, &f_perp);
    let cov = numerics::sample_cov(pilot.d(), &f_perp)?;
    if sat.degenerate || cov == 0.0 {
        return Err(DgpError::Unidentified);
    }
    let scale = numerics::sample_sd(pilot.d())? * sat.var_fperp.sqrt();
    Ok(AdversarialModel {
        g_rho: -rho_target * cov / sat.var_fperp,
        pi: pi.to_vec(),
        instrument: instrument.clone(),
        projection,
        cov_dfperp: cov,
        var_fperp: sat.var_fperp,
        conditioning_warning: cov.abs() < CONDITIONING_TOL * scale,
    })
}

/// Counts reported alongside a simulated sample.
#[derive(Debug, Clone, Default)]
pub struct SimStats {
    /// Structural errors, when the variant has additive noise.
    pub eps: Option<Vec<f64>>,
    /// Rejected rows (log-linear support truncation).
    pub redraws: usize,
}

#[derive(Debug, Clone)]
struct GaussianBlock {
    chol: Matrix,
    kappa: f64,
    rho: f64,
}

impl GaussianBlock {
    fn new(s: &SigmaSpec) -> Result<Self, DgpError> {
        s.validate()?;
        let chol = numerics::cholesky(&s.latent_cov()).map_err(|_| DgpError::NonPositiveDefinite)?;
        Ok(Self { chol, kappa: s.kappa, rho: s.rho })
    }

    /// `(D, X1, X2, eps)`.
    #[inline]
    fn draw<R: Rng>(&self, rng: &mut R) -> [f64; 4] {
        let z: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let l = &self.chol;
        let mut w = [0.0; 4];
        for i in 0..4 {
            w[i] = (0..=i).map(|k| l.get(i, k) * z[k]).sum();
        }
        w[0] += self.kappa * (w[1] * w[2] - self.rho);
        w
    }
}

#[derive(Debug, Clone)]
enum Prepared {
    Linear(LinearSpec, GaussianBlock),
    Adversarial(AdversarialSpec, GaussianBlock, AdversarialModel),
    Link(LinkModel, f64, GaussianBlock),
    LogLinear(LogLinearSpec, Gamma<f64>),
    Excluded(ExcludedSpec, ExcludedBlock),
}

#[derive(Debug, Clone)]
struct ExcludedBlock {
    x_chol: Matrix,
    // Loadings of D on (X1, X2) reproducing Cov(D, X_k) = rho.
    loadings: [f64; 2],
    shock_chol: Matrix,
}

/// A validated DGP with any pilot fit or calibration already done.
#[derive(Debug, Clone)]
pub struct Dgp {
    spec: DgpSpec,
    prepared: Prepared,
}

impl Dgp {
    pub fn prepare(spec: &DgpSpec) -> Result<Self, DgpError> {
        let prepared = match spec {
            DgpSpec::LinearInteraction(s) => {
                check_finite(&[s.alpha, s.theta, s.pi1, s.pi2, s.rho_interact])?;
                Prepared::Linear(s.clone(), GaussianBlock::new(&s.sigma)?)
            }
            DgpSpec::Adversarial(s) => {
                check_finite(&[s.alpha, s.theta, s.rho_target])?;
                check_finite(&s.pi)?;
                if matches!(s.instrument, InstrumentSpec::ExcludedColumn { .. }) {
                    return Err(DgpError::InvalidSpec("adversarial instrument must be built from covariates".into()));
                }
                if s.pilot_n < 10 {
                    return Err(DgpError::InvalidSpec("pilot_n must be at least 10".into()));
                }
                let block = GaussianBlock::new(&s.sigma)?;
                let pilot = draw_gaussian(&block, s.pilot_n, s.pilot_seed, |_, _, _| 0.0)?;
                let model = fit_adversarial(s.rho_target, &s.pi, &s.instrument, &pilot)?;
                Prepared::Adversarial(s.clone(), block, model)
            }
            DgpSpec::Probit(s) | DgpSpec::Exponential(s) | DgpSpec::Logit(s) => {
                let (model, _) = spec.link().expect("link variant");
                let block = GaussianBlock::new(&s.sigma)?;
                let alpha1 = match s.alpha1 {
                    Some(a) => {
                        check_finite(&[a])?;
                        a
                    }
                    None => calibration::calibrate_alpha(&CalibrationProblem::new(model, s.sigma))?.alpha1,
                };
                Prepared::Link(model, alpha1, block)
            }
            DgpSpec::LogLinear(s) => {
                check_finite(&[s.pi1, s.pi2, s.gamma_mean, s.gamma_var, s.rho_latent, s.sigma_d2, s.sigma_eps2])?;
                if s.gamma_mean <= 0.0 {
                    return Err(DgpError::InvalidSpec("gamma_mean must be positive".into()));
                }
                if s.rho_latent < 0.0 || s.gamma_var <= s.rho_latent {
                    return Err(DgpError::InvalidSpec("need gamma_var > rho_latent >= 0".into()));
                }
                if s.sigma_d2 <= s.rho_latent || s.sigma_eps2 <= 0.0 {
                    return Err(DgpError::InvalidSpec("need sigma_d2 > rho_latent and sigma_eps2 > 0".into()));
                }
                let v = s.gamma_var - s.rho_latent;
                let gamma = Gamma::new(s.gamma_mean * s.gamma_mean / v, v / s.gamma_mean)
                    .map_err(|e| DgpError::InvalidSpec(e.to_string()))?;
                Prepared::LogLinear(s.clone(), gamma)
            }
            DgpSpec::ExcludedInstrument(s) => {
                check_finite(&[s.alpha, s.theta, s.pi1, s.pi2, s.rho_interact, s.gamma_z, s.endog_corr])?;
                if s.endog_corr.abs() >= 1.0 {
                    return Err(DgpError::InvalidSpec("endog_corr must lie in (-1, 1)".into()));
                }
                s.sigma.validate()?;
                let g = &s.sigma;
                let sxx = Matrix::new(2, 2, vec![g.sigma_x1_2, g.rho, g.rho, g.sigma_x2_2])?;
                let x_chol = numerics::cholesky(&sxx).map_err(|_| DgpError::NonPositiveDefinite)?;
                let c = numerics::QrFactorization::new(&sxx)?.solve(&[g.rho, g.rho])?;
                let sd = g.sigma_d2.sqrt() * g.sigma_eps2.sqrt();
                let shocks =
                    Matrix::new(2, 2, vec![g.sigma_d2, s.endog_corr * sd, s.endog_corr * sd, g.sigma_eps2])?;
                let shock_chol = numerics::cholesky(&shocks).map_err(|_| DgpError::NonPositiveDefinite)?;
                Prepared::Excluded(s.clone(), ExcludedBlock { x_chol, loadings: [c[0], c[1]], shock_chol })
            }
        };
        Ok(Self { spec: spec.clone(), prepared })
    }

    pub fn spec(&self) -> &DgpSpec {
        &self.spec
    }

    /// Calibrated or configured `alpha1` of a link variant.
    pub fn alpha1(&self) -> Option<f64> {
        match &self.prepared {
            Prepared::Link(_, a, _) => Some(*a),
            _ => None,
        }
    }

    pub fn adversarial_model(&self) -> Option<&AdversarialModel> {
        match &self.prepared {
            Prepared::Adversarial(_, _, m) => Some(m),
            _ => None,
        }
    }

    /// The spec with `alpha1` filled in for link variants.
    pub fn resolved_spec(&self) -> DgpSpec {
        let mut spec = self.spec.clone();
        if let (Some(a), DgpSpec::Probit(s) | DgpSpec::Exponential(s) | DgpSpec::Logit(s)) = (self.alpha1(), &mut spec) {
            s.alpha1 = Some(a);
        }
        spec
    }

    /// The causal effect of D the variant is normalized to.
    pub fn truth_theta(&self) -> f64 {
        match &self.prepared {
            Prepared::Linear(s, _) => s.theta,
            Prepared::Adversarial(s, _, _) => s.theta,
            Prepared::Excluded(s, _) => s.theta,
            Prepared::Link(..) | Prepared::LogLinear(..) => 1.0,
        }
    }

    pub fn simulate(&self, n: usize, seed: u64) -> Result<Dataset, DgpError> {
        self.simulate_with_stats(n, seed).map(|(ds, _)| ds)
    }

    pub fn simulate_with_stats(&self, n: usize, seed: u64) -> Result<(Dataset, SimStats), DgpError> {
        if n < 10 {
            return Err(DgpError::InvalidSpec(format!("n = {n} is below the minimum of 10")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match &self.prepared {
            Prepared::Linear(s, block) => {
                let mut eps = Vec::with_capacity(n);
                let ds = draw_gaussian_rng(block, n, &mut rng, |d, x, e| {
                    eps.push(e);
                    s.alpha + s.theta * d + s.pi1 * x[0] + s.pi2 * x[1] + s.rho_interact * x[0] * x[1] + e
                })?;
                Ok((ds, SimStats { eps: Some(eps), redraws: 0 }))
            }
            Prepared::Adversarial(s, block, model) => {
                let mut eps = Vec::with_capacity(n);
                let ds = draw_gaussian_rng(block, n, &mut rng, |d, _, e| {
                    eps.push(e);
                    s.alpha + s.theta * d + e
                })?;
                let f = instruments::build_instrument(&model.instrument, &ds)?;
                let y: Vec<f64> = (0..n)
                    .map(|i| ds.y()[i] + numerics::dot(ds.x().row(i), &model.pi) + model.g_rho * f[i])
                    .collect();
                Ok((ds.with_y(y)?, SimStats { eps: Some(eps), redraws: 0 }))
            }
            Prepared::Link(model, a1, block) => {
                let (model, a1) = (*model, *a1);
                let mut eps = Vec::new();
                let mut u = Vec::with_capacity(n);
                let uniform_or_noise = matches!(model, LinkModel::Probit | LinkModel::Logit);
                // Outcome noise is drawn after the covariate block so each row consumes
                // a fixed number of variates.
                let ds = draw_gaussian_rng(block, n, &mut rng, |d, x, e| {
                    let w = a1 * d + x[0] + x[1];
                    u.push(w);
                    if !uniform_or_noise {
                        eps.push(e);
                    }
                    0.0
                })?;
                let y: Vec<f64> = match model {
                    LinkModel::Probit => u.iter().map(|w| bernoulli(&mut rng, numerics::normal_cdf(*w))).collect(),
                    LinkModel::Logit => u.iter().map(|w| bernoulli(&mut rng, numerics::logistic(*w))).collect(),
                    LinkModel::Exponential => u.iter().zip(&eps).map(|(w, e)| w.exp() + e).collect(),
                    LinkModel::LinearIdentity => u.iter().zip(&eps).map(|(w, e)| w + e).collect(),
                };
                let eps = (!uniform_or_noise).then_some(eps);
                Ok((ds.with_y(y)?, SimStats { eps, redraws: 0 }))
            }
            Prepared::LogLinear(s, gamma) => {
                let sr = s.rho_latent.sqrt();
                let sd_delta = (s.sigma_d2 - s.rho_latent).sqrt();
                let sd_eps = s.sigma_eps2.sqrt();
                let (mut y, mut d, mut x1, mut x2, mut eps) =
                    (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
                let mut redraws = 0;
                while y.len() < n {
                    let zl: f64 = StandardNormal.sample(&mut rng);
                    let g1 = gamma.sample(&mut rng);
                    let g2 = gamma.sample(&mut rng);
                    let delta: f64 = StandardNormal.sample(&mut rng);
                    let e: f64 = StandardNormal.sample(&mut rng);
                    let (a, b) = (g1 + sr * zl, g2 + sr * zl);
                    if a <= 0.0 || b <= 0.0 {
                        redraws += 1;
                        continue;
                    }
                    let dv = sd_delta * delta + sr * zl;
                    let ev = sd_eps * e;
                    y.push(dv + s.pi1 * a.ln() + s.pi2 * b.ln() + ev);
                    d.push(dv);
                    x1.push(a);
                    x2.push(b);
                    eps.push(ev);
                }
                let x = Matrix::from_columns(&[&x1, &x2])?;
                Ok((Dataset::from_parts(y, d, x, None)?, SimStats { eps: Some(eps), redraws }))
            }
            Prepared::Excluded(s, b) => {
                let (mut y, mut d, mut x1, mut x2, mut z, mut eps) = (
                    Vec::with_capacity(n),
                    Vec::with_capacity(n),
                    Vec::with_capacity(n),
                    Vec::with_capacity(n),
                    Vec::with_capacity(n),
                    Vec::with_capacity(n),
                );
                for _ in 0..n {
                    let u: [f64; 5] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                    let a = b.x_chol.get(0, 0) * u[0];
                    let c = b.x_chol.get(1, 0) * u[0] + b.x_chol.get(1, 1) * u[1];
                    let nu = b.shock_chol.get(0, 0) * u[2];
                    let e = b.shock_chol.get(1, 0) * u[2] + b.shock_chol.get(1, 1) * u[3];
                    let zv = u[4];
                    let dv = s.gamma_z * zv + b.loadings[0] * a + b.loadings[1] * c + nu;
                    y.push(s.alpha + s.theta * dv + s.pi1 * a + s.pi2 * c + s.rho_interact * a * c + e);
                    d.push(dv);
                    x1.push(a);
                    x2.push(c);
                    z.push(zv);
                    eps.push(e);
                }
                let x = Matrix::from_columns(&[&x1, &x2])?;
                let z = Matrix::from_columns(&[&z])?;
                Ok((Dataset::from_parts(y, d, x, Some(z))?, SimStats { eps: Some(eps), redraws: 0 }))
            }
        }
    }

    /// Monte Carlo mean of `dE[Y | D, X] / dD`.
    pub fn average_partial_effect(&self, draws: usize, seed: u64) -> f64 {
        match &self.prepared {
            Prepared::Link(model, a1, block) => {
                if *a1 == 0.0 {
                    return 0.0;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut acc = 0.0;
                for _ in 0..draws {
                    let [d, x1, x2, _] = block.draw(&mut rng);
                    acc += a1 * calibration::g_prime(*model, a1 * d + x1 + x2);
                }
                acc / draws as f64
            }
            Prepared::LogLinear(..) => 1.0,
            _ => self.truth_theta(),
        }
    }
}

/// Convenience: prepare and simulate.
pub fn simulate(spec: &DgpSpec, n: usize, seed: u64) -> Result<Dataset, DgpError> {
    Dgp::prepare(spec)?.simulate(n, seed)
}

/// Convenience: prepare and compute the average partial effect.
pub fn average_partial_effect(spec: &DgpSpec, draws: usize, seed: u64) -> Result<f64, DgpError> {
    Ok(Dgp::prepare(spec)?.average_partial_effect(draws, seed))
}

fn check_finite(vals: &[f64]) -> Result<(), DgpError> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DgpError::InvalidSpec("parameters must be finite".into()))
    }
}

#[inline]
fn bernoulli<R: Rng>(rng: &mut R, p: f64) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

fn draw_gaussian(
    block: &GaussianBlock,
    n: usize,
    seed: u64,
    outcome: impl FnMut(f64, [f64; 2], f64) -> f64,
) -> Result<Dataset, DgpError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    draw_gaussian_rng(block, n, &mut rng, outcome)
}

fn draw_gaussian_rng(
    block: &GaussianBlock,
    n: usize,
    rng: &mut ChaCha8Rng,
    mut outcome: impl FnMut(f64, [f64; 2], f64) -> f64,
) -> Result<Dataset, DgpError> {
    let (mut y, mut d) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut xdata = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let [dv, a, b, e] = block.draw(rng);
        y.push(outcome(dv, [a, b], e));
        d.push(dv);
        xdata.push(a);
        xdata.push(b);
    }
    let x = Matrix::new(n, 2, xdata)?;
    Ok(Dataset::from_parts(y, d, x, None)?)
}
