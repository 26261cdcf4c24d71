//! Replication engine and reports: single experiments, interaction sweeps,
//! the semi-synthetic exercise and the transform audit.
//!
//! Each replication seeds its own generator from `(master_seed, rep, grid)`,
//! and results are collected in replication order, so output does not depend
//! on the worker count.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{fmt17, Dataset};
use crate::dgp::{Dgp, DgpError, DgpSpec};
use crate::estimator::{self, EstimatorError};
use crate::instruments::{InstrumentSpec, TransformId};
use crate::numerics;

/// Share of unidentified replications above which a report carries a warning.
pub const UNIDENTIFIED_WARN_SHARE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum McError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("every replication was unidentified")]
    AllUnidentified,
    #[error(transparent)]
    Dgp(#[from] DgpError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

fn default_transform() -> TransformId {
    TransformId::Identity
}

fn default_truth() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dgp: DgpSpec,
    pub instrument: InstrumentSpec,
    #[serde(default = "default_transform")]
    pub transform: TransformId,
    pub n_per_rep: usize,
    pub replications: usize,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_grid: Option<Vec<f64>>,
    #[serde(default = "default_truth")]
    pub truth_theta: f64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), McError> {
        if self.replications < 2 {
            return Err(McError::InvalidConfig("replications must be at least 2".into()));
        }
        if self.n_per_rep < 50 {
            return Err(McError::InvalidConfig("n_per_rep must be at least 50".into()));
        }
        if let Some(grid) = &self.rho_grid {
            if grid.is_empty() || grid.iter().any(|r| !r.is_finite()) {
                return Err(McError::InvalidConfig("rho_grid must be a non-empty list of finite values".into()));
            }
        }
        if !self.truth_theta.is_finite() {
            return Err(McError::InvalidConfig("truth_theta must be finite".into()));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replication `rep` at grid point `grid`.
pub fn mix_seed(master: u64, rep: u64, grid: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ rep) ^ grid.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub replications: usize,
    pub mean_theta: f64,
    pub rep_sd: f64,
    pub mc_se: f64,
    pub percentile_ci95: (f64, f64),
    pub truth_theta: f64,
    pub rejects_truth: bool,
    pub unidentified_count: usize,
    pub unidentified_reps: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    /// Estimates of identified replications, in replication order.
    pub per_rep_theta: Vec<f64>,
    pub summary: Summary,
}

impl SimulationReport {
    pub fn from_estimates(estimates: &[Option<f64>], truth_theta: f64) -> Result<Self, McError> {
        let per_rep_theta: Vec<f64> = estimates.iter().flatten().copied().collect();
        let unidentified_reps: Vec<usize> =
            estimates.iter().enumerate().filter(|(_, e)| e.is_none()).map(|(i, _)| i).collect();
        if per_rep_theta.is_empty() {
            return Err(McError::AllUnidentified);
        }
        let r = per_rep_theta.len();
        let mean_theta = numerics::mean(&per_rep_theta);
        let rep_sd = if r >= 2 { numerics::sample_sd(&per_rep_theta).unwrap_or(0.0) } else { 0.0 };
        let mut sorted = per_rep_theta.clone();
        sorted.sort_by(f64::total_cmp);
        let ci = (numerics::quantile(&sorted, 0.025), numerics::quantile(&sorted, 0.975));
        let share = unidentified_reps.len() as f64 / estimates.len() as f64;
        let warning = (share > UNIDENTIFIED_WARN_SHARE).then(|| {
            format!(
                "{} of {} replications unidentified ({:.1}%); summaries use the rest",
                unidentified_reps.len(),
                estimates.len(),
                100.0 * share
            )
        });
        Ok(Self {
            per_rep_theta,
            summary: Summary {
                replications: estimates.len(),
                mean_theta,
                rep_sd,
                mc_se: rep_sd / (r as f64).sqrt(),
                percentile_ci95: ci,
                truth_theta,
                rejects_truth: truth_theta < ci.0 || truth_theta > ci.1,
                unidentified_count: unidentified_reps.len(),
                unidentified_reps,
                warning,
            },
        })
    }

    pub fn mean(&self) -> f64 {
        self.summary.mean_theta
    }

    pub fn mc_se(&self) -> f64 {
        self.summary.mc_se
    }
}

fn replicate(
    dgp: &Dgp,
    instrument: &InstrumentSpec,
    transform: TransformId,
    n: usize,
    replications: usize,
    master_seed: u64,
    grid: u64,
) -> Result<Vec<Option<f64>>, McError> {
    (0..replications)
        .into_par_iter()
        .map(|r| {
            let ds = dgp.simulate(n, mix_seed(master_seed, r as u64, grid))?;
            match estimator::tsls(&ds, instrument, transform) {
                Ok(est) => Ok(Some(est.theta_hat)),
                Err(e) if e.is_unidentified() => Ok(None),
                Err(e) => Err(e.into()),
            }
        })
        .collect()
}

/// Runs `replications` simulate-and-estimate rounds on a prepared DGP.
pub fn run_prepared(dgp: &Dgp, cfg: &ExperimentConfig, grid: u64) -> Result<SimulationReport, McError> {
    cfg.validate()?;
    let est = replicate(dgp, &cfg.instrument, cfg.transform, cfg.n_per_rep, cfg.replications, cfg.master_seed, grid)?;
    SimulationReport::from_estimates(&est, cfg.truth_theta)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<SimulationReport, McError> {
    cfg.validate()?;
    let dgp = Dgp::prepare(&cfg.dgp)?;
    run_prepared(&dgp, cfg, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub rho: f64,
    pub report: SimulationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub truth_theta: f64,
    pub points: Vec<SweepPoint>,
}

/// Default interaction grid: 13 points on `[-3, 3]`.
pub fn default_rho_grid() -> Vec<f64> {
    (0..13).map(|i| -3.0 + 0.5 * i as f64).collect()
}

/// One experiment per interaction coefficient in the grid.
pub fn bias_sweep(cfg: &ExperimentConfig) -> Result<SweepReport, McError> {
    cfg.validate()?;
    let grid = cfg.rho_grid.clone().unwrap_or_else(default_rho_grid);
    let mut points = Vec::with_capacity(grid.len());
    for (g, &rho) in grid.iter().enumerate() {
        let spec = cfg.dgp.with_rho_interact(rho).ok_or_else(|| {
            McError::InvalidConfig(format!("sweep needs a linear_interaction or excluded_instrument dgp, got {}", cfg.dgp.name()))
        })?;
        let dgp = Dgp::prepare(&spec)?;
        let report = run_prepared(&dgp, cfg, g as u64)?;
        points.push(SweepPoint { rho, report });
    }
    Ok(SweepReport { truth_theta: cfg.truth_theta, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemisynthRow {
    pub dgp: String,
    /// Calibrated coefficient for the link models.
    pub alpha1: Option<f64>,
    pub ape: f64,
    pub report: SimulationReport,
}

/// Table-style exercise: each DGP is prepared (calibrating when needed) and
/// estimated by the linear IV model.
pub fn semisynth(
    dgps: &[DgpSpec],
    instrument: &InstrumentSpec,
    n_per_rep: usize,
    replications: usize,
    master_seed: u64,
    ape_draws: usize,
) -> Result<Vec<SemisynthRow>, McError> {
    dgps.iter()
        .enumerate()
        .map(|(g, spec)| {
            let dgp = Dgp::prepare(spec)?;
            let cfg = ExperimentConfig {
                dgp: dgp.resolved_spec(),
                instrument: instrument.clone(),
                transform: TransformId::Identity,
                n_per_rep,
                replications,
                master_seed,
                rho_grid: None,
                truth_theta: 1.0,
            };
            let report = run_prepared(&dgp, &cfg, g as u64)?;
            let ape = dgp.average_partial_effect(ape_draws, mix_seed(master_seed, u64::MAX, g as u64));
            Ok(SemisynthRow { dgp: spec.name().to_string(), alpha1: dgp.alpha1(), ape, report })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub transform: TransformId,
    pub theta_hat: Option<f64>,
    pub se_robust: Option<f64>,
    pub ci95: Option<(f64, f64)>,
    pub first_stage_f: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditTable {
    /// Divisor applied to estimates and intervals, when standardized.
    pub scale: Option<f64>,
    pub rows: Vec<AuditRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Estimates the linear IV model once per control transform. Failing rows are
/// reported in the table. With `standardize`, estimates and intervals are
/// divided by the robust SE of the identity row.
pub fn transform_audit(
    ds: &Dataset,
    spec: &InstrumentSpec,
    transforms: &[TransformId],
    standardize: bool,
) -> Result<AuditTable, McError> {
    let mut rows = Vec::with_capacity(transforms.len());
    for &h in transforms {
        rows.push(match estimator::tsls(ds, spec, h) {
            Ok(e) => AuditRow {
                transform: h,
                theta_hat: Some(e.theta_hat),
                se_robust: Some(e.se_robust),
                ci95: Some(e.ci95),
                first_stage_f: Some(e.first_stage_f),
                error: None,
            },
            Err(EstimatorError::Instrument(e @ crate::instruments::InstrumentError::DomainError { .. })) => {
                failed(h, e.to_string())
            }
            Err(e) if e.is_unidentified() => failed(h, e.to_string()),
            Err(e) => return Err(e.into()),
        });
    }
    let mut note = None;
    let mut scale = None;
    if standardize {
        let linear = match estimator::tsls(ds, spec, TransformId::Identity) {
            Ok(e) if e.se_robust > 0.0 => Some(e.se_robust),
            _ => None,
        };
        match linear {
            Some(s) => {
                scale = Some(s);
                for r in &mut rows {
                    r.theta_hat = r.theta_hat.map(|v| v / s);
                    r.se_robust = r.se_robust.map(|v| v / s);
                    r.ci95 = r.ci95.map(|(a, b)| (a / s, b / s));
                }
            }
            None => note = Some("identity row unavailable; estimates left unstandardized".to_string()),
        }
    }
    Ok(AuditTable { scale, rows, note })
}

fn failed(transform: TransformId, error: String) -> AuditRow {
    AuditRow { transform, theta_hat: None, se_robust: None, ci95: None, first_stage_f: None, error: Some(error) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
    Svg,
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "svg" | "svg_scatter" => Ok(Format::Svg),
            other => Err(format!("unknown format \"{other}\" (expected csv, json or svg)")),
        }
    }
}

/// Rows `(rho, rep, theta_hat, identified)`; unidentified replications have an
/// empty estimate.
pub fn sweep_csv(sweep: &SweepReport) -> String {
    let mut out = String::from("rho,rep,theta_hat,identified\n");
    for p in &sweep.points {
        push_report_rows(&mut out, &fmt17(p.rho), &p.report);
    }
    out
}

pub fn report_csv(report: &SimulationReport, rho: Option<f64>) -> String {
    let mut out = String::from("rho,rep,theta_hat,identified\n");
    push_report_rows(&mut out, &rho.map(fmt17).unwrap_or_default(), report);
    out
}

fn push_report_rows(out: &mut String, rho: &str, report: &SimulationReport) {
    let mut est = report.per_rep_theta.iter();
    let mut skip = report.summary.unidentified_reps.iter().peekable();
    for rep in 0..report.summary.replications {
        if skip.peek() == Some(&&rep) {
            skip.next();
            let _ = writeln!(out, "{rho},{rep},,false");
        } else if let Some(t) = est.next() {
            let _ = writeln!(out, "{rho},{rep},{},true", fmt17(*t));
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ReportDoc {
    config: ExperimentConfig,
    per_rep_theta: Vec<f64>,
    summary: Summary,
}

pub fn report_json(report: &SimulationReport, cfg: &ExperimentConfig) -> Result<String, McError> {
    let doc = ReportDoc { config: cfg.clone(), per_rep_theta: report.per_rep_theta.clone(), summary: report.summary.clone() };
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

/// Inverse of [`report_json`].
pub fn parse_report_json(text: &str) -> Result<(ExperimentConfig, SimulationReport), McError> {
    let doc: ReportDoc = serde_json::from_str(text)?;
    Ok((doc.config, SimulationReport { per_rep_theta: doc.per_rep_theta, summary: doc.summary }))
}

#[derive(Serialize)]
struct SweepDoc<'a> {
    config: &'a ExperimentConfig,
    points: &'a [SweepPoint],
}

pub fn sweep_json(sweep: &SweepReport, cfg: &ExperimentConfig) -> Result<String, McError> {
    Ok(serde_json::to_string_pretty(&SweepDoc { config: cfg, points: &sweep.points })? + "\n")
}

/// Static scatter: one dot per replication per grid value and a dashed line at
/// the true effect.
pub fn sweep_svg(sweep: &SweepReport) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    let all = sweep.points.iter().flat_map(|p| p.report.per_rep_theta.iter().copied());
    let (mut lo, mut hi) = all.fold((sweep.truth_theta, sweep.truth_theta), |(a, b), v| (a.min(v), b.max(v)));
    if hi - lo < 1e-9 {
        lo -= 1.0;
        hi += 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let k = sweep.points.len().max(1) as f64;
    let band = (W - 2.0 * M) / k;
    let ypos = |v: f64| H - M - (v - lo) / (hi - lo) * (H - 2.0 * M);

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{M} {M} L{M} {:.3} L{:.3} {:.3}" fill="none" stroke="black" stroke-width="1"/>"#,
        H - M,
        W - M,
        H - M
    );
    for (g, p) in sweep.points.iter().enumerate() {
        let cx = M + band * (g as f64 + 0.5);
        let _ = writeln!(s, r#"<text x="{cx:.3}" y="{:.3}" font-size="10" text-anchor="middle">{}</text>"#, H - M + 15.0, p.rho);
        let _ = writeln!(s, r#"<g fill="steelblue" fill-opacity="0.5">"#);
        for (r, v) in p.report.per_rep_theta.iter().enumerate() {
            // Deterministic horizontal jitter within the band.
            let jitter = ((r as f64 * 0.618_033_988_75).fract() - 0.5) * band * 0.6;
            let _ = writeln!(s, r#"<circle cx="{:.3}" cy="{:.3}" r="1.5"/>"#, cx + jitter, ypos(*v));
        }
        let _ = writeln!(s, "</g>");
    }
    let ty = ypos(sweep.truth_theta);
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{ty:.3}" x2="{:.3}" y2="{ty:.3}" stroke="black" stroke-width="1" stroke-dasharray="6,4"/>"#,
        W - M
    );
    for v in [lo + pad, sweep.truth_theta, hi - pad] {
        let _ = writeln!(s, r#"<text x="{:.3}" y="{:.3}" font-size="10" text-anchor="end">{v:.2}</text>"#, M - 5.0, ypos(v) + 3.0);
    }
    let _ = writeln!(s, r#"<text x="{:.3}" y="{:.3}" font-size="12" text-anchor="middle">interaction coefficient</text>"#, W / 2.0, H - 10.0);
    let _ = writeln!(s, "</svg>");
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<(), McError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| McError::Io { path: parent.display().to_string(), source })?;
    }
    std::fs::write(path, text).map_err(|source| McError::Io { path: path.display().to_string(), source })
}

/// Writes a sweep in the requested format.
pub fn emit_sweep(sweep: &SweepReport, cfg: &ExperimentConfig, format: Format, path: &Path) -> Result<(), McError> {
    let text = match format {
        Format::Csv => sweep_csv(sweep),
        Format::Json => sweep_json(sweep, cfg)?,
        Format::Svg => sweep_svg(sweep),
    };
    write_text(path, &text)
}

/// Writes a single-experiment report. SVG draws it as a one-point sweep.
pub fn emit_report(report: &SimulationReport, cfg: &ExperimentConfig, format: Format, path: &Path) -> Result<(), McError> {
    let text = match format {
        Format::Csv => report_csv(report, None),
        Format::Json => report_json(report, cfg)?,
        Format::Svg => sweep_svg(&SweepReport {
            truth_theta: cfg.truth_theta,
            points: vec![SweepPoint { rho: 0.0, report: report.clone() }],
        }),
    };
    write_text(path, &text)
}
