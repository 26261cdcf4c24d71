//! Command implementations behind the `ivforge` binary.
//!
//! Every command reads one JSON config; flags only override the seed, the
//! worker count and the output location.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{self, CalibrationError, CalibrationProblem, LinkModel};
use crate::data_model::{self, ColumnRole, DataError};
use crate::dgp::{Dgp, DgpError, DgpSpec, SigmaSpec};
use crate::estimator::EstimatorError;
use crate::instruments::{self, InstrumentError, InstrumentSpec, TransformId};
use crate::montecarlo::{self, ExperimentConfig, Format, McError};
use crate::weak_causality::{self, MonotoneFn, SignFamily, WcError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_UNIDENTIFIED: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("config error: {0}")]
    Config(String),
    #[error("identification failure: {0}")]
    Identification(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => EXIT_CONFIG,
            AppError::Identification(_) => EXIT_UNIDENTIFIED,
            AppError::Io(_) => EXIT_IO,
        }
    }
}

impl From<DgpError> for AppError {
    fn from(e: DgpError) -> Self {
        match e {
            DgpError::Unidentified => AppError::Identification(e.to_string()),
            DgpError::Calibration(c) => c.into(),
            DgpError::Instrument(i) => i.into(),
            DgpError::Data(d) => d.into(),
            DgpError::Numerics(_) => AppError::Identification(e.to_string()),
            DgpError::InvalidSpec(_) | DgpError::NonPositiveDefinite => AppError::Config(format!("dgp: {e}")),
        }
    }
}

impl From<CalibrationError> for AppError {
    fn from(e: CalibrationError) -> Self {
        match e {
            CalibrationError::NoRoot { .. } => AppError::Identification(format!("calibration: {e}")),
            CalibrationError::Invalid(_) => AppError::Config(format!("calibration: {e}")),
        }
    }
}

impl From<InstrumentError> for AppError {
    fn from(e: InstrumentError) -> Self {
        match e {
            InstrumentError::IndexOutOfRange { .. } | InstrumentError::RepeatedIndex(_) | InstrumentError::NoColumns => {
                AppError::Config(format!("instrument: {e}"))
            }
            _ => AppError::Identification(format!("instrument: {e}")),
        }
    }
}

impl From<EstimatorError> for AppError {
    fn from(e: EstimatorError) -> Self {
        match e {
            EstimatorError::Instrument(i) => i.into(),
            other => AppError::Identification(other.to_string()),
        }
    }
}

impl From<McError> for AppError {
    fn from(e: McError) -> Self {
        match e {
            McError::InvalidConfig(_) => AppError::Config(e.to_string()),
            McError::AllUnidentified => AppError::Identification(e.to_string()),
            McError::Dgp(d) => d.into(),
            McError::Estimator(x) => x.into(),
            McError::Io { .. } | McError::Json(_) => AppError::Io(e.to_string()),
        }
    }
}

impl From<DataError> for AppError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } | DataError::Csv { .. } => AppError::Io(e.to_string()),
            other => AppError::Config(format!("data: {other}")),
        }
    }
}

impl From<WcError> for AppError {
    fn from(e: WcError) -> Self {
        match e {
            WcError::Unidentified => AppError::Identification(e.to_string()),
            WcError::Instrument(i) => i.into(),
            other => AppError::Config(format!("diagnose: {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Sweep,
    Semisynth,
    Audit,
    Calibrate,
    Diagnose,
}

#[derive(Debug, Clone)]
pub struct RunArgs {
    pub command: Command,
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
}

/// What a command produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// Human-readable summary for stdout.
    pub summary: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub dgp: DgpSpec,
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemisynthConfig {
    pub dgps: Vec<DgpSpec>,
    #[serde(default = "InstrumentSpec::product")]
    pub instrument: InstrumentSpec,
    pub n_per_rep: usize,
    pub replications: usize,
    pub master_seed: u64,
    #[serde(default = "default_ape_draws")]
    pub ape_draws: usize,
}

fn default_ape_draws() -> usize {
    1_000_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    /// CSV path, relative to the config file.
    pub data: PathBuf,
    pub roles: HashMap<String, ColumnRole>,
    pub instrument: InstrumentSpec,
    #[serde(default = "all_transforms")]
    pub transforms: Vec<TransformId>,
    #[serde(default = "yes")]
    pub standardize: bool,
}

fn all_transforms() -> Vec<TransformId> {
    TransformId::ALL.to_vec()
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateConfig {
    pub model: LinkModel,
    #[serde(default = "SigmaSpec::semisynth")]
    pub sigma: SigmaSpec,
    #[serde(default)]
    pub tolerance: Option<f64>,
    #[serde(default)]
    pub bracket: Option<(f64, f64)>,
    #[serde(default)]
    pub quad_nodes: Option<usize>,
    #[serde(default)]
    pub ape_draws: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FkgConfig {
    pub pairs: usize,
    pub draws: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub dgp: DgpSpec,
    pub n: usize,
    pub seed: u64,
    #[serde(default = "InstrumentSpec::product")]
    pub instrument: InstrumentSpec,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default)]
    pub fkg: Option<FkgConfig>,
    #[serde(default = "yes")]
    pub witness: bool,
}

fn default_bins() -> usize {
    5
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, AppError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AppError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))
}

fn worker_count(flag: Option<usize>) -> Result<usize, AppError> {
    if let Some(t) = flag {
        return if t == 0 { Err(AppError::Config("--threads must be positive".into())) } else { Ok(t) };
    }
    if let Ok(v) = std::env::var("IVFORGE_THREADS") {
        return match v.trim().parse::<usize>() {
            Ok(t) if t > 0 => Ok(t),
            _ => Err(AppError::Config(format!("IVFORGE_THREADS must be a positive integer, got \"{v}\""))),
        };
    }
    Ok(std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn out_dir(args: &RunArgs) -> PathBuf {
    args.out.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn write(path: PathBuf, text: &str, files: &mut Vec<PathBuf>) -> Result<(), AppError> {
    montecarlo::write_text(&path, text)?;
    files.push(path);
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, AppError> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| AppError::Io(e.to_string()))
}

/// Runs one command inside a worker pool of the configured size.
pub fn run(args: &RunArgs) -> Result<Outcome, AppError> {
    let threads = worker_count(args.threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| AppError::Config(format!("cannot start {threads} workers: {e}")))?;
    pool.install(|| match args.command {
        Command::Simulate => simulate(args),
        Command::Sweep => sweep(args),
        Command::Semisynth => semisynth(args),
        Command::Audit => audit(args),
        Command::Calibrate => calibrate(args),
        Command::Diagnose => diagnose(args),
    })
}

fn simulate(args: &RunArgs) -> Result<Outcome, AppError> {
    let cfg: SimulateConfig = read_config(&args.config)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let dgp = Dgp::prepare(&cfg.dgp)?;
    let (ds, stats) = dgp.simulate_with_stats(cfg.n, seed)?;
    let path = out_dir(args).join("dataset.csv");
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| AppError::Io(format!("{}: {e}", parent.display())))?;
    }
    data_model::write_csv(&ds, &path)?;
    let mut summary = format!("simulated {} rows from {} (seed {seed})\n", ds.n(), cfg.dgp.name());
    if let Some(a) = dgp.alpha1() {
        let _ = writeln!(summary, "alpha1 = {a:.10}");
    }
    if stats.redraws > 0 {
        let _ = writeln!(summary, "rows redrawn for support: {}", stats.redraws);
    }
    Ok(Outcome { files: vec![path], summary })
}

fn sweep(args: &RunArgs) -> Result<Outcome, AppError> {
    let mut cfg: ExperimentConfig = read_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    let report = montecarlo::bias_sweep(&cfg)?;
    let dir = out_dir(args);
    let mut files = Vec::new();
    write(dir.join("sweep.csv"), &montecarlo::sweep_csv(&report), &mut files)?;
    write(dir.join("sweep.svg"), &montecarlo::sweep_svg(&report), &mut files)?;
    if args.format == Some(Format::Json) {
        write(dir.join("sweep.json"), &montecarlo::sweep_json(&report, &cfg)?, &mut files)?;
    }
    let mut summary = String::from("rho      mean_theta   mc_se      ci_lo      ci_hi      rejects\n");
    for p in &report.points {
        let s = &p.report.summary;
        let _ = writeln!(
            summary,
            "{:<8} {:<12.5} {:<10.5} {:<10.5} {:<10.5} {}",
            p.rho, s.mean_theta, s.mc_se, s.percentile_ci95.0, s.percentile_ci95.1, s.rejects_truth
        );
        if let Some(w) = &s.warning {
            let _ = writeln!(summary, "  warning: {w}");
        }
    }
    Ok(Outcome { files, summary })
}

#[derive(Serialize)]
struct SemisynthDoc<'a> {
    config: &'a SemisynthConfig,
    rows: &'a [montecarlo::SemisynthRow],
}

fn semisynth(args: &RunArgs) -> Result<Outcome, AppError> {
    let mut cfg: SemisynthConfig = read_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    let rows = montecarlo::semisynth(
        &cfg.dgps,
        &cfg.instrument,
        cfg.n_per_rep,
        cfg.replications,
        cfg.master_seed,
        cfg.ape_draws,
    )?;
    let mut csv = String::from("dgp,alpha1,ape,mean_theta,mc_se,ci_lo,ci_hi,rejects_truth,unidentified\n");
    let mut summary = String::from("dgp                 alpha1      mean_theta  ci95                    rejects\n");
    for r in &rows {
        let s = &r.report.summary;
        let a = r.alpha1.map(data_model::fmt17).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{a},{},{},{},{},{},{},{}",
            r.dgp,
            data_model::fmt17(r.ape),
            data_model::fmt17(s.mean_theta),
            data_model::fmt17(s.mc_se),
            data_model::fmt17(s.percentile_ci95.0),
            data_model::fmt17(s.percentile_ci95.1),
            s.rejects_truth,
            s.unidentified_count
        );
        let _ = writeln!(
            summary,
            "{:<19} {:<11} {:<11.4} [{:.4}, {:.4}]{:>10}",
            r.dgp,
            r.alpha1.map_or("-".to_string(), |a| format!("{a:.5}")),
            s.mean_theta,
            s.percentile_ci95.0,
            s.percentile_ci95.1,
            s.rejects_truth
        );
    }
    let dir = out_dir(args);
    let mut files = Vec::new();
    write(dir.join("semisynth.csv"), &csv, &mut files)?;
    write(dir.join("semisynth.json"), &to_json(&SemisynthDoc { config: &cfg, rows: &rows })?, &mut files)?;
    Ok(Outcome { files, summary })
}

fn audit(args: &RunArgs) -> Result<Outcome, AppError> {
    let cfg: AuditConfig = read_config(&args.config)?;
    let data = if cfg.data.is_absolute() {
        cfg.data.clone()
    } else {
        args.config.parent().unwrap_or(Path::new(".")).join(&cfg.data)
    };
    let read = data_model::read_csv(&data, &cfg.roles)?;
    let ds = read.dataset;
    cfg.instrument.validate(ds.x().cols(), ds.z().map(|z| z.cols()))?;
    let table = montecarlo::transform_audit(&ds, &cfg.instrument, &cfg.transforms, cfg.standardize)?;
    if table.rows.iter().all(|r| r.theta_hat.is_none()) {
        return Err(AppError::Identification("no transform row is identified".into()));
    }
    let mut csv = String::from("transform,theta_hat,se_robust,ci_lo,ci_hi,first_stage_f,error\n");
    let mut summary = String::new();
    if !read.ignored.is_empty() {
        let _ = writeln!(summary, "ignored columns: {}", read.ignored.join(", "));
    }
    if let Some(s) = table.scale {
        let _ = writeln!(summary, "standardized by the linear row's robust SE ({s:.6})");
    }
    if let Some(n) = &table.note {
        let _ = writeln!(summary, "note: {n}");
    }
    let num = |v: Option<f64>| v.map(data_model::fmt17).unwrap_or_default();
    for r in &table.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.transform.label(),
            num(r.theta_hat),
            num(r.se_robust),
            num(r.ci95.map(|c| c.0)),
            num(r.ci95.map(|c| c.1)),
            num(r.first_stage_f),
            r.error.as_deref().map(|e| format!("\"{}\"", e.replace('"', "'"))).unwrap_or_default()
        );
        match (r.theta_hat, r.ci95) {
            (Some(t), Some((lo, hi))) => {
                let _ = writeln!(summary, "{:<13} {t:>10.4}  [{lo:.4}, {hi:.4}]", r.transform.label());
            }
            _ => {
                let _ = writeln!(summary, "{:<13} {}", r.transform.label(), r.error.as_deref().unwrap_or("failed"));
            }
        }
    }
    let dir = out_dir(args);
    let mut files = Vec::new();
    write(dir.join("audit.csv"), &csv, &mut files)?;
    if args.format == Some(Format::Json) {
        write(dir.join("audit.json"), &to_json(&table)?, &mut files)?;
    }
    Ok(Outcome { files, summary })
}

#[derive(Serialize)]
struct CalibrateDoc {
    model: LinkModel,
    sigma: SigmaSpec,
    alpha1: f64,
    residual: f64,
    objective: f64,
    expected_gprime: f64,
    iterations: usize,
    ape_check: Option<f64>,
}

fn calibrate(args: &RunArgs) -> Result<Outcome, AppError> {
    let cfg: CalibrateConfig = read_config(&args.config)?;
    let mut problem = CalibrationProblem::new(cfg.model, cfg.sigma);
    if let Some(t) = cfg.tolerance {
        problem.tolerance = t;
    }
    if let Some(b) = cfg.bracket {
        problem.bracket = b;
    }
    if let Some(q) = cfg.quad_nodes {
        problem.quad_nodes = q;
    }
    let res = calibration::calibrate_alpha(&problem)?;
    let ape_check = match (cfg.ape_draws, spec_for(cfg.model, cfg.sigma, res.alpha1)) {
        (Some(draws), Some(spec)) => {
            let seed = args.seed.or(cfg.seed).unwrap_or(0);
            Some(Dgp::prepare(&spec)?.average_partial_effect(draws, seed))
        }
        _ => None,
    };
    let mut summary = format!("alpha1 = {:.12}\nresidual = {:.3e}\n", res.alpha1, res.residual);
    if let Some(a) = ape_check {
        let _ = writeln!(summary, "monte carlo APE = {a:.6}");
    }
    let doc = CalibrateDoc {
        model: cfg.model,
        sigma: cfg.sigma,
        alpha1: res.alpha1,
        residual: res.residual,
        objective: res.objective,
        expected_gprime: res.expected_gprime,
        iterations: res.iterations,
        ape_check,
    };
    let mut files = Vec::new();
    if let Some(dir) = &args.out {
        write(dir.join("calibrate.json"), &to_json(&doc)?, &mut files)?;
    }
    Ok(Outcome { files, summary })
}

fn spec_for(model: LinkModel, sigma: SigmaSpec, alpha1: f64) -> Option<DgpSpec> {
    let link = crate::dgp::LinkSpec { alpha1: Some(alpha1), sigma };
    match model {
        LinkModel::Probit => Some(DgpSpec::Probit(link)),
        LinkModel::Exponential => Some(DgpSpec::Exponential(link)),
        LinkModel::Logit => Some(DgpSpec::Logit(link)),
        LinkModel::LinearIdentity => None,
    }
}

#[derive(Serialize)]
struct DiagnoseDoc {
    dgp: String,
    n: usize,
    saturation: weak_causality::SaturationTest,
    cov_dfperp: f64,
    first_stage_f: f64,
    fkg: Option<FkgSummary>,
    witness: Option<WitnessSummary>,
}

#[derive(Serialize)]
struct FkgSummary {
    pairs: usize,
    sign_ok: usize,
    worst_z: f64,
}

#[derive(Serialize)]
struct WitnessSummary {
    found: bool,
    theta_iv: Option<f64>,
    pmf: Option<Vec<Vec<f64>>>,
    y_table: Option<Vec<Vec<f64>>>,
    mean_independent_witness: bool,
}

fn diagnose(args: &RunArgs) -> Result<Outcome, AppError> {
    let cfg: DiagnoseConfig = read_config(&args.config)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let ds = Dgp::prepare(&cfg.dgp)?.simulate(cfg.n, seed)?;
    let f = instruments::build_instrument(&cfg.instrument, &ds)?;
    let f_perp = instruments::residualize_on_controls(&f, ds.x())?;
    let sat = weak_causality::saturation_test(&f_perp, ds.x(), cfg.bins)?;
    let rel = instruments::check_relevance(ds.d(), &f_perp)?;

    let fkg = cfg.fkg.as_ref().map(|c| {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(c.seed);
        let mut ok = 0;
        let mut worst = f64::INFINITY;
        for k in 0..c.pairs {
            let g = MonotoneFn::random(&mut rng);
            let h = MonotoneFn::random(&mut rng);
            let r = weak_causality::fkg_check(&g, &h, c.draws, montecarlo::mix_seed(c.seed, k as u64, 1));
            ok += usize::from(r.sign_ok);
            let signed = if g.increasing == h.increasing { r.cov } else { -r.cov };
            if r.mc_se > 0.0 {
                worst = worst.min(signed / r.mc_se);
            }
        }
        FkgSummary { pairs: c.pairs, sign_ok: ok, worst_z: worst }
    });

    let witness = cfg.witness.then(|| {
        let w = weak_causality::find_sign_violation(&SignFamily::default(), &InstrumentSpec::product(), weak_causality::WIT_TOL);
        let restricted = SignFamily { mean_independent_only: true, ..Default::default() };
        let none = weak_causality::find_sign_violation(
            &restricted,
            &InstrumentSpec::ExcludedColumn { column: 0 },
            weak_causality::WIT_TOL,
        );
        WitnessSummary {
            found: w.is_some(),
            theta_iv: w.as_ref().map(|w| w.theta_iv),
            pmf: w.as_ref().map(|w| w.model.pmf.clone()),
            y_table: w.as_ref().map(|w| w.model.y_table.clone()),
            mean_independent_witness: none.is_some(),
        }
    });

    let mut summary = String::new();
    let _ = writeln!(summary, "saturation test: stat = {:.3} over {} bins -> {}", sat.stat, sat.bins_used,
        if sat.pass { "E[f_perp | X] = 0 not rejected" } else { "E[f_perp | X] != 0 (estimand not weakly causal)" });
    let _ = writeln!(summary, "first stage: cov(d, f_perp) = {:.5}, robust F = {:.2}", rel.cov_dfperp, rel.first_stage_f);
    if rel.cov_dfperp < 0.0 {
        let _ = writeln!(summary, "note: treatment decreases in the residualized instrument");
    }
    if let Some(k) = &fkg {
        let _ = writeln!(summary, "FKG sweep: {}/{} pairs sign-consistent (worst z = {:.2})", k.sign_ok, k.pairs, k.worst_z);
    }
    if let Some(w) = &witness {
        match w.theta_iv {
            Some(t) => {
                let _ = writeln!(summary, "sign violation (product instrument): theta_IV = {t:.6} with monotone outcomes");
            }
            None => {
                let _ = writeln!(summary, "sign violation (product instrument): none found");
            }
        }
        let _ = writeln!(summary, "sign violation (mean-independent instrument): {}", if w.mean_independent_witness { "found" } else { "none" });
    }
    let doc = DiagnoseDoc {
        dgp: cfg.dgp.name().to_string(),
        n: ds.n(),
        saturation: sat,
        cov_dfperp: rel.cov_dfperp,
        first_stage_f: rel.first_stage_f,
        fkg,
        witness,
    };
    let mut files = Vec::new();
    write(out_dir(args).join("diagnose.json"), &to_json(&doc)?, &mut files)?;
    Ok(Outcome { files, summary })
}
