//! Acceptance criteria 1-9. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ivforge::app::{self, Command, RunArgs};
use ivforge::calibration::{self, CalibrationProblem, LinkModel};
use ivforge::dgp::{AdversarialSpec, Dgp, DgpSpec, ExcludedSpec, LinearSpec, LinkSpec, LogLinearSpec, SigmaSpec, PILOT_N, PILOT_SEED};
use ivforge::estimator::{self, EstimatorError};
use ivforge::instruments::{Combiner, InstrumentSpec, TransformId};
use ivforge::montecarlo::{self, ExperimentConfig};
use ivforge::numerics::Matrix;
use ivforge::weak_causality::{self, DiscreteControls, MonotoneFn, SignFamily, WIT_TOL};
use ivforge::Dataset;
use rand::SeedableRng;

type Check = fn() -> Outcome;

struct Outcome {
    pass: bool,
    detail: String,
}

fn linear(rho: f64) -> DgpSpec {
    DgpSpec::LinearInteraction(LinearSpec { rho_interact: rho, ..Default::default() })
}

fn experiment(dgp: DgpSpec, instrument: InstrumentSpec, n: usize, reps: usize, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        dgp,
        instrument,
        transform: TransformId::Identity,
        n_per_rep: n,
        replications: reps,
        master_seed: seed,
        rho_grid: None,
        truth_theta: 1.0,
    }
}

fn criterion_1() -> Outcome {
    let r = montecarlo::run_experiment(&experiment(linear(0.0), InstrumentSpec::product(), 2000, 500, 101)).unwrap();
    let s = &r.summary;
    let z = (s.mean_theta - 1.0).abs() / s.mc_se;
    Outcome { pass: z < 4.0, detail: format!("mean {:.4}, mc_se {:.4}, |mean-1|/mc_se {z:.2} (< 4)", s.mean_theta, s.mc_se) }
}

fn criterion_2() -> Outcome {
    let dgp = Dgp::prepare(&linear(0.0)).unwrap();
    let pilot = dgp.simulate(PILOT_N, PILOT_SEED).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    let (mut rhos, mut biases) = (Vec::new(), Vec::new());
    for (g, rho) in [-2.0, -1.0, 0.0, 1.0, 2.0].into_iter().enumerate() {
        let r = montecarlo::run_experiment(&experiment(linear(rho), InstrumentSpec::product(), 2000, 500, 200 + g as u64)).unwrap();
        let empirical = 1.0 - r.summary.mean_theta;
        let plug_in = estimator::corollary_bias(&pilot, rho).unwrap();
        let z = (empirical - plug_in).abs() / r.summary.mc_se;
        pass &= z < 3.0;
        parts.push(format!("rho {rho}: {empirical:.3} vs {plug_in:.3} ({z:.2} se)"));
        rhos.push(rho);
        biases.push(empirical);
    }
    let r2 = r_squared(&rhos, &biases);
    pass &= r2 > 0.99;
    Outcome { pass, detail: format!("{}; R^2 {r2:.5} (> 0.99)", parts.join(", ")) }
}

fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy * sxy / (sxx * syy)
}

fn criterion_3() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (g, target) in [-5.0, 2.5, 10.0].into_iter().enumerate() {
        let spec = DgpSpec::Adversarial(AdversarialSpec { rho_target: target, ..Default::default() });
        let r = montecarlo::run_experiment(&experiment(spec, InstrumentSpec::product(), 2000, 500, 300 + g as u64)).unwrap();
        let bias = 1.0 - r.summary.mean_theta;
        let z = (bias - target).abs() / r.summary.mc_se;
        pass &= z < 3.0;
        parts.push(format!("target {target}: bias {bias:.3} ({z:.2} se)"));
    }
    Outcome { pass, detail: parts.join(", ") }
}

fn criterion_4() -> Outcome {
    let mut b = experiment(
        DgpSpec::ExcludedInstrument(ExcludedSpec::default()),
        InstrumentSpec::ExcludedColumn { column: 0 },
        1000,
        200,
        401,
    );
    b.rho_grid = Some(montecarlo::default_rho_grid());
    let sweep_b = montecarlo::bias_sweep(&b).unwrap();
    let worst = sweep_b.points.iter().map(|p| (p.report.summary.mean_theta - 1.0).abs()).fold(0.0, f64::max);
    let mut a = experiment(linear(0.0), InstrumentSpec::product(), 1000, 200, 402);
    a.rho_grid = Some(vec![3.0]);
    let sweep_a = montecarlo::bias_sweep(&a).unwrap();
    let s = &sweep_a.points[0].report.summary;
    let z = (s.mean_theta - 1.0).abs() / s.mc_se;
    Outcome {
        pass: sweep_b.points.len() == 13 && worst < 0.05 && z > 10.0,
        detail: format!(
            "(b) {} points, max |mean-1| {worst:.4} (< 0.05); (a) rho=3 mean {:.3}, {z:.1} se from 1 (> 10)",
            sweep_b.points.len(),
            s.mean_theta
        ),
    }
}

fn criterion_5() -> Outcome {
    let link = LinkSpec::default();
    let dgps = [
        DgpSpec::LogLinear(LogLinearSpec::default()),
        DgpSpec::Probit(link.clone()),
        DgpSpec::Exponential(link.clone()),
        DgpSpec::Logit(link),
    ];
    let rows = montecarlo::semisynth(&dgps, &InstrumentSpec::product(), 1000, 1000, 501, 1_000_000).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for row in &rows {
        let s = &row.report.summary;
        let sign_ok = match row.dgp.as_str() {
            "log_linear" | "probit" => s.mean_theta < 0.0,
            _ => s.mean_theta > 0.0 && s.mean_theta < 1.0,
        };
        pass &= s.rejects_truth && sign_ok;
        parts.push(format!(
            "{} mean {:.3} ci ({:.3}, {:.3}) excludes 1: {}, sign: {}",
            row.dgp,
            s.mean_theta,
            s.percentile_ci95.0,
            s.percentile_ci95.1,
            s.rejects_truth,
            if sign_ok { "ok" } else { "wrong" }
        ));
    }
    Outcome { pass, detail: parts.join("; ") }
}

fn criterion_6() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (model, spec) in [
        (LinkModel::Probit, DgpSpec::Probit(LinkSpec::default())),
        (LinkModel::Exponential, DgpSpec::Exponential(LinkSpec::default())),
        (LinkModel::Logit, DgpSpec::Logit(LinkSpec::default())),
    ] {
        let res = calibration::calibrate_alpha(&CalibrationProblem::new(model, SigmaSpec::semisynth())).unwrap();
        let dgp = Dgp::prepare(&spec).unwrap();
        let ape = dgp.average_partial_effect(1_000_000, 601);
        let ok = res.residual.abs() < 1e-8 && (ape - 1.0).abs() < 0.02;
        pass &= ok;
        parts.push(format!("{model:?} alpha1 {:.4} residual {:.1e} APE {ape:.4}", res.alpha1, res.residual));
    }
    let mut worst: f64 = 0.0;
    for v in [0.5, 2.0, 5.0, 20.0] {
        let probit = calibration::expected_gprime(LinkModel::Probit, v, 64);
        worst = worst.max((probit - 1.0 / (2.0 * std::f64::consts::PI * (v + 1.0)).sqrt()).abs());
        let expo = calibration::expected_gprime(LinkModel::Exponential, v, 64);
        worst = worst.max((expo - (v / 2.0f64).exp()).abs());
    }
    pass &= worst < 1e-8;
    parts.push(format!("quadrature error {worst:.1e} (< 1e-8)"));
    Outcome { pass, detail: parts.join(", ") }
}

fn criterion_7() -> Outcome {
    let dgp = Dgp::prepare(&linear(0.0)).unwrap();
    let ds = dgp.simulate(2000, 701).unwrap();
    let sum = InstrumentSpec::Transform { transform: TransformId::Identity, columns: vec![0, 1], combiner: Combiner::Sum };
    let linear_unid = matches!(estimator::tsls(&ds, &sum, TransformId::Identity), Err(e) if e.is_unidentified());

    // Binary covariates with their interaction: the dummies saturate X.
    let base = dgp.simulate(2000, 702).unwrap();
    let b1: Vec<f64> = base.x().column(0).iter().map(|v| f64::from(u8::from(*v > 0.0))).collect();
    let b2: Vec<f64> = base.x().column(1).iter().map(|v| f64::from(u8::from(*v > 0.0))).collect();
    let b12: Vec<f64> = b1.iter().zip(&b2).map(|(a, b)| a * b).collect();
    let x = Matrix::from_columns(&[&b1, &b2, &b12]).unwrap();
    let sat = Dataset::from_parts(base.y().to_vec(), base.d().to_vec(), x, None).unwrap();
    let dummy_unid = matches!(
        estimator::tsls(&sat, &InstrumentSpec::product(), TransformId::Identity),
        Err(EstimatorError::Unidentified(_))
    );
    let mut discrete = weak_causality::random_model(703);
    discrete.controls = DiscreteControls::Saturated;
    let discrete_unid = discrete_is_unidentified(&discrete);

    let identified = (0..50u64)
        .filter(|s| {
            let ds = dgp.simulate(2000, 710 + s).unwrap();
            estimator::tsls(&ds, &InstrumentSpec::product(), TransformId::Identity).is_ok()
        })
        .count();
    Outcome {
        pass: linear_unid && dummy_unid && discrete_unid && identified == 50,
        detail: format!(
            "linear instrument unidentified: {linear_unid}; saturated dummies unidentified: {dummy_unid} (discrete model: {discrete_unid}); product identified {identified}/50"
        ),
    }
}

fn discrete_is_unidentified(m: &weak_causality::DiscreteModel) -> bool {
    weak_causality::discrete_theta_iv(m, &InstrumentSpec::product()) == Err(weak_causality::WcError::Unidentified)
}

fn criterion_8() -> Outcome {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(801);
    let fkg_ok = (0..100u64)
        .filter(|k| {
            let g = MonotoneFn::random(&mut rng);
            let h = MonotoneFn::random(&mut rng);
            weak_causality::fkg_check(&g, &h, 20_000, 8_000 + k).sign_ok
        })
        .count();

    let z = InstrumentSpec::ExcludedColumn { column: 0 };
    let mut worst_z: f64 = 0.0;
    for k in 0..10u64 {
        let m = weak_causality::random_model(810 + k);
        let exact = weak_causality::discrete_theta_iv(&m, &z).unwrap();
        let ds = m.sample(1_000_000, 820 + k).unwrap();
        let est = estimator::tsls(&ds, &z, TransformId::Identity).unwrap();
        worst_z = worst_z.max((est.theta_hat - exact).abs() / est.se_robust);
    }

    let witness = weak_causality::find_sign_violation(&SignFamily::default(), &InstrumentSpec::product(), WIT_TOL);
    let verified = witness.as_ref().is_some_and(|w| {
        w.model.monotone_outcome
            && w.model.validate().is_ok()
            && w.theta_iv < -WIT_TOL
            && weak_causality::discrete_theta_iv(&w.model, &InstrumentSpec::product()) == Ok(w.theta_iv)
    });
    let restricted = SignFamily { mean_independent_only: true, ..Default::default() };
    let none = weak_causality::find_sign_violation(&restricted, &z, WIT_TOL).is_none();
    Outcome {
        pass: fkg_ok == 100 && worst_z < 3.0 && verified && none,
        detail: format!(
            "FKG {fkg_ok}/100; discrete vs sampled max {worst_z:.2} se (< 3); witness {}; mean-independent witness absent: {none}",
            witness.map_or("none".to_string(), |w| format!("theta_IV {:.4}, verified {verified}", w.theta_iv))
        ),
    }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn example_runs() -> Vec<(Command, &'static str)> {
    vec![
        (Command::Sweep, "fig1a.json"),
        (Command::Sweep, "fig1b.json"),
        (Command::Semisynth, "semisynth.json"),
        (Command::Simulate, "adversarial.json"),
        (Command::Audit, "audit.json"),
        (Command::Calibrate, "calibrate.json"),
        (Command::Diagnose, "diagnose.json"),
    ]
}

fn run_all(dir: &Path, threads: usize) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for (command, name) in example_runs() {
        let target = dir.join(name.trim_end_matches(".json"));
        let args = RunArgs {
            command,
            config: configs_dir().join(name),
            out: Some(target),
            format: Some(montecarlo::Format::Json),
            threads: Some(threads),
            seed: None,
        };
        let outcome = app::run(&args).unwrap_or_else(|e| panic!("{name}: {e}"));
        for f in outcome.files {
            out.push((format!("{name}/{}", f.file_name().unwrap().to_string_lossy()), std::fs::read(&f).unwrap()));
        }
    }
    out
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let first = run_all(&tmp.path().join("t1"), 1);
    let again = run_all(&tmp.path().join("t1b"), 1);
    let four = run_all(&tmp.path().join("t4"), 4);
    let mismatched: Vec<&str> = first
        .iter()
        .zip(again.iter().zip(&four))
        .filter(|((_, a), ((_, b), (_, c)))| a != b || a != c)
        .map(|((name, _), _)| name.as_str())
        .collect();
    let same_files = first.len() == four.len() && first.len() == again.len();
    Outcome {
        pass: same_files && mismatched.is_empty() && !first.is_empty(),
        detail: format!("{} files from {} configs; mismatches: {:?}", first.len(), example_runs().len(), mismatched),
    }
}

fn main() {
    let criteria: [(u32, Check, Duration); 9] = [
        (1, criterion_1, Duration::from_secs(10)),
        (2, criterion_2, Duration::from_secs(60)),
        (3, criterion_3, Duration::from_secs(90)),
        (4, criterion_4, Duration::from_secs(60)),
        (5, criterion_5, Duration::from_secs(300)),
        (6, criterion_6, Duration::from_secs(10)),
        (7, criterion_7, Duration::from_secs(10)),
        (8, criterion_8, Duration::from_secs(60)),
        (9, criterion_9, Duration::from_secs(120)),
    ];
    let mut failed = 0;
    for (id, run, budget) in criteria {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let pass = outcome.pass && elapsed <= budget;
        failed += usize::from(!pass);
        println!(
            "criterion {id}: {} [{:.1}s of {}s] {}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs(),
            outcome.detail
        );
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
