//! Weak-causality diagnostics: a binned test of `E[f_perp | X] = 0`, FKG
//! covariance-sign checks, exact IV estimands of discrete models, and a grid
//! search for sign violations.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instruments::{self, InstrumentError, InstrumentSpec};
use crate::numerics::{self, Matrix, NumericsError};

/// Cross-bin cap of the saturation test.
pub const MAX_CROSS_BINS: usize = 25;
pub const MIN_PER_BIN: usize = 10;
/// Threshold on the largest within-bin t statistic.
pub const SAT_CRIT: f64 = 3.0;
/// Smallest negative estimand counted as a sign violation.
pub const WIT_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WcError {
    #[error("bin {bin} has {count} rows, need at least {MIN_PER_BIN}")]
    TooFewPerBin { bin: usize, count: usize },
    #[error("need at least 2 bins per covariate")]
    TooFewBins,
    #[error("invalid discrete model: {0}")]
    InvalidModel(String),
    #[error("population IV estimand is unidentified")]
    Unidentified,
    #[error(transparent)]
    Instrument(#[from] InstrumentError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaturationTest {
    pub stat: f64,
    pub pass: bool,
    pub bins_used: usize,
}

/// Bins rows by per-covariate quantiles (crossed, at most
/// [`MAX_CROSS_BINS`] cells) and reports the largest within-bin
/// `|mean(f_perp)| / (sd / sqrt(n_bin))`. Empty cells are skipped.
pub fn saturation_test(f_perp: &[f64], x: &Matrix, bins: usize) -> Result<SaturationTest, WcError> {
    if bins < 2 {
        return Err(WcError::TooFewBins);
    }
    if f_perp.len() != x.rows() {
        return Err(NumericsError::LengthMismatch { left: f_perp.len(), right: x.rows() }.into());
    }
    let j = x.cols().max(1);
    let mut per = bins;
    while per > 2 && per.pow(j as u32) > MAX_CROSS_BINS {
        per -= 1;
    }
    // With many covariates even 2 bins each exceeds the cap; bin the leading ones.
    let mut used_cols = j;
    while used_cols > 1 && per.pow(used_cols as u32) > MAX_CROSS_BINS {
        used_cols -= 1;
    }
    let cuts: Vec<Vec<f64>> = (0..used_cols)
        .map(|c| {
            let mut col = x.column(c);
            col.sort_by(f64::total_cmp);
            (1..per).map(|k| numerics::quantile(&col, k as f64 / per as f64)).collect()
        })
        .collect();
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (i, fp) in f_perp.iter().enumerate() {
        let mut key = 0;
        for (c, cut) in cuts.iter().enumerate() {
            let v = x.get(i, c);
            let idx = cut.iter().filter(|q| v > **q).count();
            key = key * per + idx;
        }
        groups.entry(key).or_default().push(*fp);
    }
    let mut stat: f64 = 0.0;
    for (bin, vals) in &groups {
        if vals.len() < MIN_PER_BIN {
            return Err(WcError::TooFewPerBin { bin: *bin, count: vals.len() });
        }
        let m = numerics::mean(vals);
        let sd = numerics::sample_sd(vals)?;
        let t = if sd > 0.0 {
            m.abs() / (sd / (vals.len() as f64).sqrt())
        } else if m.abs() > 1e-12 {
            f64::INFINITY
        } else {
            0.0
        };
        stat = stat.max(t);
    }
    Ok(SaturationTest { stat, pass: stat < SAT_CRIT, bins_used: groups.len() })
}

/// Monotone shapes for the FKG check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum MonotoneShape {
    Identity,
    PiecewiseLinear { knot: f64, left: f64, right: f64 },
    Logistic { scale: f64 },
    Cubic,
}

/// `sign * shape(x) + noise * e`, with `e` an independent noise channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonotoneFn {
    pub shape: MonotoneShape,
    pub increasing: bool,
    pub noise: f64,
}

impl MonotoneFn {
    pub fn identity() -> Self {
        Self { shape: MonotoneShape::Identity, increasing: true, noise: 0.0 }
    }

    pub fn negated(self) -> Self {
        Self { increasing: !self.increasing, ..self }
    }

    pub fn eval(&self, x: f64, e: f64) -> f64 {
        let base = match self.shape {
            MonotoneShape::Identity => x,
            MonotoneShape::PiecewiseLinear { knot, left, right } => {
                if x < knot {
                    left * (x - knot)
                } else {
                    right * (x - knot)
                }
            }
            MonotoneShape::Logistic { scale } => numerics::logistic(scale * x),
            MonotoneShape::Cubic => x * x * x,
        };
        (if self.increasing { base } else { -base }) + self.noise * e
    }

    /// Random member of the library with non-negative slopes.
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let shape = match rng.random_range(0..4) {
            0 => MonotoneShape::Identity,
            1 => MonotoneShape::PiecewiseLinear {
                knot: rng.random_range(-1.5..1.5),
                left: rng.random_range(0.0..2.0),
                right: rng.random_range(0.0..2.0),
            },
            2 => MonotoneShape::Logistic { scale: rng.random_range(0.2..5.0) },
            _ => MonotoneShape::Cubic,
        };
        Self { shape, increasing: rng.random_bool(0.5), noise: rng.random_range(0.0..2.0) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FkgCheck {
    pub cov: f64,
    pub mc_se: f64,
    pub sign_ok: bool,
}

/// Monte Carlo `Cov(g(X, e1), h(X, e2))` for `X, e1, e2` independent normals.
pub fn fkg_check(g: &MonotoneFn, h: &MonotoneFn, draws: usize, seed: u64) -> FkgCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut a, mut b) = (Vec::with_capacity(draws), Vec::with_capacity(draws));
    for _ in 0..draws {
        let x: f64 = StandardNormal.sample(&mut rng);
        let e1: f64 = StandardNormal.sample(&mut rng);
        let e2: f64 = StandardNormal.sample(&mut rng);
        a.push(g.eval(x, e1));
        b.push(h.eval(x, e2));
    }
    let cov = numerics::sample_cov(&a, &b).unwrap_or(0.0);
    let (ma, mb) = (numerics::mean(&a), numerics::mean(&b));
    let prods: Vec<f64> = a.iter().zip(&b).map(|(p, q)| (p - ma) * (q - mb)).collect();
    let mc_se = (numerics::sample_var(&prods).unwrap_or(0.0) / draws as f64).sqrt();
    let sign_ok = if g.increasing == h.increasing { cov >= -4.0 * mc_se } else { cov <= 4.0 * mc_se };
    FkgCheck { cov, mc_se, sign_ok }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscreteControls {
    /// `(1, X)`.
    Linear,
    /// One dummy per support point of X.
    Saturated,
}

/// Finite model over support points of X (rows of `x_support`) and scalar Z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteModel {
    pub x_support: Vec<Vec<f64>>,
    pub z_support: Vec<f64>,
    pub d_support: Vec<f64>,
    /// `y_table[x][d]` = potential outcome at support point x and treatment d.
    pub y_table: Vec<Vec<f64>>,
    /// `d_table[x][z]` = index into `d_support`.
    pub d_table: Vec<Vec<usize>>,
    /// `pmf[x][z]`.
    pub pmf: Vec<Vec<f64>>,
    /// Asserts that `Y(d, x)` is non-decreasing in d.
    pub monotone_outcome: bool,
    pub controls: DiscreteControls,
}

/// Flattened joint support: one entry per `(x, z)` cell.
struct Cells {
    x: Matrix,
    z: Matrix,
    y: Vec<f64>,
    d: Vec<f64>,
    p: Vec<f64>,
    x_index: Vec<usize>,
}

impl DiscreteModel {
    pub fn validate(&self) -> Result<(), WcError> {
        let bad = |m: &str| Err(WcError::InvalidModel(m.to_string()));
        let nx = self.x_support.len();
        if nx == 0 || self.z_support.is_empty() || self.d_support.is_empty() {
            return bad("supports must be non-empty");
        }
        let j = self.x_support[0].len();
        if j == 0 || self.x_support.iter().any(|r| r.len() != j) {
            return bad("x support points must share a positive dimension");
        }
        if self.y_table.len() != nx || self.y_table.iter().any(|r| r.len() != self.d_support.len()) {
            return bad("y_table must be |X| x |D|");
        }
        if self.d_table.len() != nx
            || self.d_table.iter().any(|r| r.len() != self.z_support.len() || r.iter().any(|&k| k >= self.d_support.len()))
        {
            return bad("d_table must be |X| x |Z| with valid treatment indices");
        }
        if self.pmf.len() != nx || self.pmf.iter().any(|r| r.len() != self.z_support.len()) {
            return bad("pmf must be |X| x |Z|");
        }
        if self.pmf.iter().flatten().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return bad("pmf entries must be non-negative");
        }
        let total: f64 = self.pmf.iter().flatten().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad("pmf must sum to 1");
        }
        if self.monotone_outcome {
            let mut order: Vec<usize> = (0..self.d_support.len()).collect();
            order.sort_by(|a, b| self.d_support[*a].total_cmp(&self.d_support[*b]));
            for row in &self.y_table {
                if order.windows(2).any(|w| row[w[1]] < row[w[0]]) {
                    return bad("y_table is flagged monotone but decreases in d");
                }
            }
        }
        Ok(())
    }

    fn cells(&self) -> Result<Cells, WcError> {
        self.validate()?;
        let j = self.x_support[0].len();
        let (mut xd, mut zd, mut y, mut d, mut p, mut xi) = (vec![], vec![], vec![], vec![], vec![], vec![]);
        for (ix, xs) in self.x_support.iter().enumerate() {
            for (iz, zs) in self.z_support.iter().enumerate() {
                let w = self.pmf[ix][iz];
                if w == 0.0 {
                    continue;
                }
                let dk = self.d_table[ix][iz];
                xd.extend_from_slice(xs);
                zd.push(*zs);
                d.push(self.d_support[dk]);
                y.push(self.y_table[ix][dk]);
                p.push(w);
                xi.push(ix);
            }
        }
        let n = p.len();
        Ok(Cells { x: Matrix::new(n, j, xd)?, z: Matrix::new(n, 1, zd)?, y, d, p, x_index: xi })
    }

    fn control_design(&self, cells: &Cells) -> Matrix {
        match self.controls {
            DiscreteControls::Linear => cells.x.with_intercept(),
            DiscreteControls::Saturated => {
                let nx = self.x_support.len();
                let mut m = Matrix::zeros(cells.p.len(), nx + 1);
                for (r, &ix) in cells.x_index.iter().enumerate() {
                    m.set(r, 0, 1.0);
                    m.set(r, ix + 1, 1.0);
                }
                m
            }
        }
    }

    /// Population residual of the instrument on the controls, by cell.
    fn population_residual(&self, cells: &Cells, instrument: &InstrumentSpec) -> Result<Vec<f64>, WcError> {
        let f = instruments::instrument_from_parts(instrument, &cells.x, Some(&cells.z), Some(&cells.p))?;
        let design = self.control_design(cells);
        // Weighted design; drop collinear columns so saturated dummies work.
        let mut scaled = design.clone();
        for r in 0..scaled.rows() {
            let s = cells.p[r].sqrt();
            for c in 0..scaled.cols() {
                let v = scaled.get(r, c) * s;
                scaled.set(r, c, v);
            }
        }
        let keep = numerics::independent_columns(&scaled, 1e-9);
        let reduced = numerics::select_columns(&design, &keep);
        let beta = numerics::solve_weighted_least_squares(&reduced, &f, &cells.p)?;
        let fitted = reduced.mul_vec(&beta)?;
        Ok(f.iter().zip(&fitted).map(|(a, b)| a - b).collect())
    }

    /// `max_x |E[f_perp | X = x]|` under the pmf.
    pub fn max_conditional_residual(&self, instrument: &InstrumentSpec) -> Result<f64, WcError> {
        let cells = self.cells()?;
        let fp = self.population_residual(&cells, instrument)?;
        let nx = self.x_support.len();
        let (mut num, mut den) = (vec![0.0; nx], vec![0.0; nx]);
        for (r, &ix) in cells.x_index.iter().enumerate() {
            num[ix] += cells.p[r] * fp[r];
            den[ix] += cells.p[r];
        }
        Ok((0..nx).filter(|&i| den[i] > 0.0).map(|i| (num[i] / den[i]).abs()).fold(0.0, f64::max))
    }

    /// Draws `n` rows from the pmf as `(y, d, X, Z)` columns.
    pub fn sample(&self, n: usize, seed: u64) -> Result<crate::data_model::Dataset, WcError> {
        let cells = self.cells()?;
        let mut cdf = Vec::with_capacity(cells.p.len());
        let mut acc = 0.0;
        for p in &cells.p {
            acc += p;
            cdf.push(acc);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = cells.x.cols();
        let (mut y, mut d, mut xd, mut zd) = (vec![], vec![], Vec::with_capacity(n * j), vec![]);
        for _ in 0..n {
            let u: f64 = rng.random::<f64>() * acc;
            let k = cdf.partition_point(|c| *c <= u).min(cdf.len() - 1);
            y.push(cells.y[k]);
            d.push(cells.d[k]);
            xd.extend_from_slice(cells.x.row(k));
            zd.push(cells.z.get(k, 0));
        }
        let x = Matrix::new(n, j, xd)?;
        let z = Matrix::new(n, 1, zd)?;
        crate::data_model::Dataset::from_parts(y, d, x, Some(z)).map_err(|e| WcError::InvalidModel(e.to_string()))
    }
}

/// Exact `Cov(Y, f_perp) / Cov(D, f_perp)` by enumeration of the support.
pub fn discrete_theta_iv(model: &DiscreteModel, instrument: &InstrumentSpec) -> Result<f64, WcError> {
    let cells = model.cells()?;
    let fp = model.population_residual(&cells, instrument)?;
    let f = instruments::instrument_from_parts(instrument, &cells.x, Some(&cells.z), Some(&cells.p))?;
    let var_f = numerics::weighted_cov(&f, &f, &cells.p);
    let var_fp = numerics::weighted_cov(&fp, &fp, &cells.p);
    if !(var_fp > 1e-12 * var_f.max(f64::MIN_POSITIVE)) {
        return Err(WcError::Unidentified);
    }
    let cov_d = numerics::weighted_cov(&cells.d, &fp, &cells.p);
    let var_d = numerics::weighted_cov(&cells.d, &cells.d, &cells.p);
    if !(cov_d.abs() > 1e-10 * (var_d * var_fp).sqrt()) {
        return Err(WcError::Unidentified);
    }
    Ok(numerics::weighted_cov(&cells.y, &fp, &cells.p) / cov_d)
}

/// Grid family: X on `{0,1}^2` with pmf weights stepped by 0.1, Z a fair
/// coin independent of X, `D = 1[Z = 1 or X1 X2 = 1]`, and
/// `Y(d, x) = b * x1 * x2 + tau * d` with `tau > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignFamily {
    pub b_grid: Vec<f64>,
    pub tau_grid: Vec<f64>,
    /// Skip models where the instrument fails `E[f_perp | X] = 0`.
    pub mean_independent_only: bool,
}

impl Default for SignFamily {
    fn default() -> Self {
        Self { b_grid: vec![-2.0, -1.5, -1.0, -0.5, 0.0], tau_grid: vec![0.5, 1.0], mean_independent_only: false }
    }
}

impl SignFamily {
    /// Every model of the family, in search order.
    pub fn models(&self) -> Vec<DiscreteModel> {
        let x_support = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let mut out = Vec::new();
        for a in 1..=7u32 {
            for b in 1..=7u32 {
                for c in 1..=7u32 {
                    if a + b + c >= 10 {
                        continue;
                    }
                    let px = [a as f64 / 10.0, b as f64 / 10.0, c as f64 / 10.0, (10 - a - b - c) as f64 / 10.0];
                    for &bb in &self.b_grid {
                        for &tau in &self.tau_grid {
                            let y_table = x_support.iter().map(|x| vec![bb * x[0] * x[1], bb * x[0] * x[1] + tau]).collect();
                            let d_table = x_support
                                .iter()
                                .map(|x| (0..2).map(|z| usize::from(z == 1 || x[0] * x[1] == 1.0)).collect())
                                .collect();
                            out.push(DiscreteModel {
                                x_support: x_support.clone(),
                                z_support: vec![0.0, 1.0],
                                d_support: vec![0.0, 1.0],
                                y_table,
                                d_table,
                                pmf: px.iter().map(|p| vec![0.5 * p, 0.5 * p]).collect(),
                                monotone_outcome: tau >= 0.0,
                                controls: DiscreteControls::Linear,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub model: DiscreteModel,
    pub theta_iv: f64,
    pub max_conditional_residual: f64,
}

/// First model of the family whose IV estimand is below `-wit_tol` although
/// every potential outcome is non-decreasing in the treatment.
pub fn find_sign_violation(family: &SignFamily, instrument: &InstrumentSpec, wit_tol: f64) -> Option<Witness> {
    for model in family.models() {
        if !model.monotone_outcome || model.validate().is_err() {
            continue;
        }
        let Ok(resid) = model.max_conditional_residual(instrument) else { continue };
        if family.mean_independent_only && resid > 1e-12 {
            continue;
        }
        let Ok(theta) = discrete_theta_iv(&model, instrument) else { continue };
        if theta < -wit_tol {
            // Re-verify by a fresh enumeration.
            let again = discrete_theta_iv(&model, instrument).ok()?;
            debug_assert_eq!(again, theta);
            return Some(Witness { model, theta_iv: again, max_conditional_residual: resid });
        }
    }
    None
}

/// Random 2x2x2 model with monotone outcomes and a first stage increasing in z.
pub fn random_model(seed: u64) -> DiscreteModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_support = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
    let raw: Vec<Vec<f64>> = (0..4).map(|_| (0..2).map(|_| rng.random_range(0.05..1.0)).collect()).collect();
    let total: f64 = raw.iter().flatten().sum();
    let pmf = raw.iter().map(|r| r.iter().map(|p| p / total).collect()).collect();
    let y_table = (0..4)
        .map(|_| {
            let y0: f64 = rng.random_range(-2.0..2.0);
            vec![y0, y0 + rng.random_range(0.0..2.0)]
        })
        .collect();
    // Redraw until some support point has compliers.
    let d_table: Vec<Vec<usize>> = loop {
        let t: Vec<Vec<usize>> = (0..4)
            .map(|_| {
                let d0 = usize::from(rng.random_bool(0.5));
                vec![d0, d0.max(usize::from(rng.random_bool(0.7)))]
            })
            .collect();
        if t.iter().any(|r| r[0] < r[1]) {
            break t;
        }
    };
    DiscreteModel {
        x_support,
        z_support: vec![0.0, 1.0],
        d_support: vec![0.0, 1.0],
        y_table,
        d_table,
        pmf,
        monotone_outcome: true,
        controls: DiscreteControls::Linear,
    }
}
