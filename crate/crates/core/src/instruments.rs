//! Instrument construction, covariate transforms and identification checks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::Dataset;
use crate::numerics::{self, Matrix, NumericsError, QrFactorization};

/// `var(f_perp) <= SAT_TOL * var(f)` means the instrument is linear in the controls.
pub const SAT_TOL: f64 = 1e-8;
/// Reported first-stage F is capped here.
pub const F_CAP: f64 = 1e12;
/// Conventional weak-instrument threshold.
pub const WEAK_F: f64 = 10.0;
/// TanhRatio inputs are clamped to `[-TANH_CLAMP, TANH_CLAMP]`.
pub const TANH_CLAMP: f64 = 280.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InstrumentError {
    #[error("instrument uses an excluded column but the dataset has no z")]
    MissingExcluded,
    #[error("{what} index {index} out of range (have {len})")]
    IndexOutOfRange { what: &'static str, index: usize, len: usize },
    #[error("product instrument needs two distinct covariates, got {0} twice")]
    RepeatedIndex(usize),
    #[error("transform instrument needs at least one column")]
    NoColumns,
    #[error("{transform:?} is undefined at row {row}, column {col}")]
    DomainError { transform: TransformId, row: usize, col: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Elementwise covariate transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformId {
    Identity,
    CenteredExp,
    Log1p,
    TanhRatio,
}

impl TransformId {
    pub const ALL: [TransformId; 4] =
        [TransformId::Identity, TransformId::CenteredExp, TransformId::Log1p, TransformId::TanhRatio];

    pub fn label(self) -> &'static str {
        match self {
            TransformId::Identity => "identity",
            TransformId::CenteredExp => "centered_exp",
            TransformId::Log1p => "log1p",
            TransformId::TanhRatio => "tanh_ratio",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combiner {
    Product,
    Sum,
}

/// How the instrument is built. Covariate and z indices are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InstrumentSpec {
    Product { i: usize, j: usize },
    Transform { transform: TransformId, columns: Vec<usize>, combiner: Combiner },
    ExcludedColumn { column: usize },
}

impl InstrumentSpec {
    pub fn product() -> Self {
        InstrumentSpec::Product { i: 0, j: 1 }
    }

    pub fn validate(&self, n_x: usize, n_z: Option<usize>) -> Result<(), InstrumentError> {
        let in_x = |index: usize| {
            if index < n_x {
                Ok(())
            } else {
                Err(InstrumentError::IndexOutOfRange { what: "covariate", index, len: n_x })
            }
        };
        match self {
            InstrumentSpec::Product { i, j } => {
                in_x(*i)?;
                in_x(*j)?;
                if i == j {
                    return Err(InstrumentError::RepeatedIndex(*i));
                }
            }
            InstrumentSpec::Transform { columns, .. } => {
                if columns.is_empty() {
                    return Err(InstrumentError::NoColumns);
                }
                columns.iter().try_for_each(|c| in_x(*c))?;
            }
            InstrumentSpec::ExcludedColumn { column } => {
                let len = n_z.ok_or(InstrumentError::MissingExcluded)?;
                if *column >= len {
                    return Err(InstrumentError::IndexOutOfRange { what: "excluded", index: *column, len });
                }
            }
        }
        Ok(())
    }
}

fn apply_one(h: TransformId, x: f64, center: f64) -> f64 {
    match h {
        TransformId::Identity => x,
        TransformId::CenteredExp => (x - center).exp(),
        TransformId::Log1p => x.ln_1p(),
        TransformId::TanhRatio => {
            let x = x.clamp(-TANH_CLAMP, TANH_CLAMP);
            (2.0 * (2.0 * x).exp() - 2.0 * (-2.0 * x).exp())
                / (2.5 * (2.5 * x).exp() + 2.5 * (-2.5 * x).exp())
        }
    }
}

/// Columnwise transform; CenteredExp centers each column at `weights`-mean
/// (uniform when `None`).
pub fn apply_transform_weighted(h: TransformId, x: &Matrix, weights: Option<&[f64]>) -> Result<Matrix, InstrumentError> {
    let (n, k) = (x.rows(), x.cols());
    let centers: Vec<f64> = (0..k)
        .map(|j| {
            let col = x.column(j);
            match weights {
                Some(w) => numerics::weighted_mean(&col, w),
                None => numerics::mean(&col),
            }
        })
        .collect();
    let mut out = Matrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            let v = x.get(i, j);
            if h == TransformId::Log1p && v <= -1.0 {
                return Err(InstrumentError::DomainError { transform: h, row: i, col: j });
            }
            out.set(i, j, apply_one(h, v, centers[j]));
        }
    }
    Ok(out)
}

pub fn apply_transform(h: TransformId, x: &Matrix) -> Result<Matrix, InstrumentError> {
    apply_transform_weighted(h, x, None)
}

/// Instrument column from raw covariates `x` and optional excluded block `z`.
pub fn instrument_from_parts(
    spec: &InstrumentSpec,
    x: &Matrix,
    z: Option<&Matrix>,
    weights: Option<&[f64]>,
) -> Result<Vec<f64>, InstrumentError> {
    spec.validate(x.cols(), z.map(Matrix::cols))?;
    let n = x.rows();
    Ok(match spec {
        InstrumentSpec::Product { i, j } => (0..n).map(|r| x.get(r, *i) * x.get(r, *j)).collect(),
        InstrumentSpec::ExcludedColumn { column } => z.ok_or(InstrumentError::MissingExcluded)?.column(*column),
        InstrumentSpec::Transform { transform, columns, combiner } => {
            let sub = numerics::select_columns(x, columns);
            let t = apply_transform_weighted(*transform, &sub, weights)?;
            (0..n)
                .map(|r| match combiner {
                    Combiner::Product => t.row(r).iter().product(),
                    Combiner::Sum => t.row(r).iter().sum(),
                })
                .collect()
        }
    })
}

/// Raw (not residualized) instrument column.
pub fn build_instrument(spec: &InstrumentSpec, ds: &Dataset) -> Result<Vec<f64>, InstrumentError> {
    instrument_from_parts(spec, ds.x(), ds.z(), None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaturationCheck {
    pub var_f: f64,
    pub var_fperp: f64,
    pub degenerate: bool,
}

/// Residualizes `f` on `(1, x)` after dropping collinear control columns, so
/// saturated dummy sets are handled. Returns `f_perp`.
pub fn residualize_on_controls(f: &[f64], x: &Matrix) -> Result<Vec<f64>, InstrumentError> {
    let design = x.with_intercept();
    let keep = numerics::independent_columns(&design, 1e-9);
    let reduced = numerics::select_columns(&design, &keep);
    Ok(numerics::residualize(f, &reduced)?)
}

/// Whether `f` is (numerically) linear in the controls `x`.
pub fn check_saturation(f: &[f64], x: &Matrix) -> Result<SaturationCheck, InstrumentError> {
    let f_perp = residualize_on_controls(f, x)?;
    Ok(saturation_from_residual(f, &f_perp))
}

pub(crate) fn saturation_from_residual(f: &[f64], f_perp: &[f64]) -> SaturationCheck {
    let var_f = numerics::sample_var(f).unwrap_or(0.0);
    let var_fperp = numerics::sample_var(f_perp).unwrap_or(0.0).max(0.0);
    SaturationCheck { var_f, var_fperp, degenerate: var_fperp <= SAT_TOL * var_f }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelevanceCheck {
    pub cov_dfperp: f64,
    pub first_stage_f: f64,
    pub weak: bool,
}

/// Covariance of `d` with `f_perp` and the HC1 first-stage F of `d ~ 1 + f_perp`.
pub fn check_relevance(d: &[f64], f_perp: &[f64]) -> Result<RelevanceCheck, InstrumentError> {
    let cov_dfperp = numerics::sample_cov(d, f_perp)?;
    let design = Matrix::from_columns(&[f_perp])?.with_intercept();
    let first_stage_f = match QrFactorization::new(&design) {
        Ok(qr) => {
            let beta = qr.solve(d)?;
            let fitted = design.mul_vec(&beta)?;
            let resid: Vec<f64> = d.iter().zip(&fitted).map(|(a, b)| a - b).collect();
            let v = numerics::sandwich_hc1(&design, &qr.gram_inverse(), &resid);
            let var_b = v.get(1, 1);
            if var_b > 0.0 {
                (beta[1] * beta[1] / var_b).min(F_CAP)
            } else if beta[1] != 0.0 {
                F_CAP
            } else {
                0.0
            }
        }
        Err(NumericsError::RankDeficient { .. }) => 0.0,
        Err(e) => return Err(e.into()),
    };
    Ok(RelevanceCheck { cov_dfperp, first_stage_f, weak: first_stage_f < WEAK_F })
}
