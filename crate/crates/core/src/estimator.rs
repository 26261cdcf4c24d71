//! Linear IV estimation: the covariance-ratio estimand, full 2SLS with HC1
//! errors, and the closed-form bias of the product instrument.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::Dataset;
use crate::instruments::{self, InstrumentError, InstrumentSpec, TransformId};
use crate::numerics::{self, Matrix, NumericsError, QrFactorization};

/// Relevance threshold, relative to `sd(d) * sd(f_perp)`.
pub const REL_TOL: f64 = 1e-10;
/// Two-sided 95% normal quantile.
pub const Z975: f64 = 1.959964;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnidentifiedReason {
    /// The instrument is linear in the controls.
    Saturated,
    /// The residualized instrument is uncorrelated with the treatment.
    Irrelevant,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("treatment effect is unidentified ({0:?})")]
    Unidentified(UnidentifiedReason),
    #[error(transparent)]
    Instrument(#[from] InstrumentError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl EstimatorError {
    pub fn is_unidentified(&self) -> bool {
        matches!(self, EstimatorError::Unidentified(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvEstimate {
    pub theta_hat: f64,
    /// Intercept followed by the control coefficients.
    pub coeffs: Vec<f64>,
    pub se_robust: f64,
    pub ci95: (f64, f64),
    pub var_fperp: f64,
    pub cov_dfperp: f64,
    pub first_stage_f: f64,
    pub weak_instrument: bool,
    pub n: usize,
}

fn relevance_gate(d: &[f64], f_perp: &[f64]) -> Result<f64, EstimatorError> {
    let cov = numerics::sample_cov(d, f_perp)?;
    let scale = numerics::sample_sd(d)? * numerics::sample_sd(f_perp)?;
    if !(cov.abs() > REL_TOL * scale) {
        return Err(EstimatorError::Unidentified(UnidentifiedReason::Irrelevant));
    }
    Ok(cov)
}

/// `Cov(y, f_perp) / Cov(d, f_perp)`.
pub fn iv_ratio(y: &[f64], d: &[f64], f_perp: &[f64]) -> Result<f64, EstimatorError> {
    let cov_d = relevance_gate(d, f_perp)?;
    Ok(numerics::sample_cov(y, f_perp)? / cov_d)
}

/// 2SLS of `y` on `(1, d, controls)` with instrument column `f`.
pub fn tsls_with_instrument(y: &[f64], d: &[f64], f: &[f64], controls: &Matrix) -> Result<IvEstimate, EstimatorError> {
    let n = y.len();
    let f_perp = instruments::residualize_on_controls(f, controls)?;
    let sat = instruments::saturation_from_residual(f, &f_perp);
    if sat.degenerate {
        return Err(EstimatorError::Unidentified(UnidentifiedReason::Saturated));
    }
    let cov_dfperp = relevance_gate(d, &f_perp)?;
    let rel = instruments::check_relevance(d, &f_perp)?;

    let base = controls.with_intercept();
    let first = base.insert_column(1, f)?;
    let gamma = numerics::solve_least_squares(&first, d)?;
    let d_hat = first.mul_vec(&gamma)?;

    let second = base.insert_column(1, &d_hat)?;
    let qr = QrFactorization::new(&second)?;
    let beta = qr.solve(y)?;
    let structural = base.insert_column(1, d)?;
    let fitted = structural.mul_vec(&beta)?;
    let resid: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let v = numerics::sandwich_hc1(&second, &qr.gram_inverse(), &resid);
    let se = v.get(1, 1).max(0.0).sqrt();

    let theta = beta[1];
    let mut coeffs = vec![beta[0]];
    coeffs.extend_from_slice(&beta[2..]);
    Ok(IvEstimate {
        theta_hat: theta,
        coeffs,
        se_robust: se,
        ci95: (theta - Z975 * se, theta + Z975 * se),
        var_fperp: sat.var_fperp,
        cov_dfperp,
        first_stage_f: rel.first_stage_f,
        weak_instrument: rel.weak,
        n,
    })
}

/// 2SLS with instrument `spec` built from raw covariates and controls `h(X)`.
pub fn tsls(ds: &Dataset, spec: &InstrumentSpec, h: TransformId) -> Result<IvEstimate, EstimatorError> {
    let f = instruments::build_instrument(spec, ds)?;
    let controls = instruments::apply_transform(h, ds.x())?;
    tsls_with_instrument(ds.y(), ds.d(), &f, &controls)
}

/// Plug-in `theta - theta_IV` for the product instrument when the outcome
/// carries `rho * X1 * X2`: `-rho * Var(f_perp) / Cov(D, f_perp)`.
pub fn corollary_bias(pilot: &Dataset, rho: f64) -> Result<f64, EstimatorError> {
    let f = instruments::build_instrument(&InstrumentSpec::product(), pilot)?;
    let f_perp = numerics::residualize(&f, &pilot.x().with_intercept())?;
    let sat = instruments::saturation_from_residual(&f, &f_perp);
    if sat.degenerate {
        return Err(EstimatorError::Unidentified(UnidentifiedReason::Saturated));
    }
    let cov = relevance_gate(pilot.d(), &f_perp)?;
    Ok(-rho * sat.var_fperp / cov)
}
