//! Built-in invariant checks: a fast, deterministic subset of the
//! numerical identities the library is built on. Any failure maps to the
//! numerical-failure exit code.

use nalgebra::DMatrix;

use elppi::auxiliary::{build_aux, AuxSpec};
use elppi::el::{solve_inner, ConstraintMatrix, SolverControls};
use elppi::error::Error;
use elppi::estimator::{fit, supervised_init};
use elppi::harness::{
    generate, result_csv, run_experiment, ExperimentSpec, MethodId, Scenario, ScenarioParams,
};
use elppi::infer::{inference_report, weighted_chisq_quantile};
use elppi::model::{builtin_mean_model, ProblemConfig};
use elppi::numeric::{chi2_quantile, rep_rng};

fn check(name: &str, ok: bool, detail: String) -> Result<(), Error> {
    if ok {
        println!("ok {name}");
        Ok(())
    } else {
        Err(Error::Numerical(format!("selftest {name}: {detail}")))
    }
}

/// Root of `sum_i z_i / (1 + t z_i) = 0` by bisection; requires interior
/// zero so both endpoints diverge with opposite signs.
fn bisect_multiplier(z: &[f64]) -> f64 {
    let zmax = z.iter().cloned().fold(f64::MIN, f64::max);
    let zmin = z.iter().cloned().fold(f64::MAX, f64::min);
    let (mut lo, mut hi) = (-1.0 / zmax + 1e-12, -1.0 / zmin - 1e-12);
    for _ in 0..500 {
        let mid = 0.5 * (lo + hi);
        if z.iter().map(|&v| v / (1.0 + mid * v)).sum::<f64>() > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn solver_vs_bisection() -> Result<(), Error> {
    let controls = SolverControls::default();
    let mut worst = 0.0_f64;
    for rep in 0..30 {
        let mut rng = rep_rng(90, rep);
        let data = generate(
            Scenario::MeanInference,
            &ScenarioParams::default(),
            40,
            50,
            &mut rng,
        )?;
        let mut z: Vec<f64> = data.labeled_y.iter().cloned().collect();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        for v in z.iter_mut() {
            *v -= mean - 0.05;
        }
        let t = bisect_multiplier(&z);
        let oracle =
            -z.iter().map(|&v| (1.0 + t * v).ln()).sum::<f64>() - 40.0 * 40.0_f64.ln();
        let cm = ConstraintMatrix::new(DMatrix::from_column_slice(40, 1, &z), 0)?;
        let sol = solve_inner(&cm, &controls)?;
        worst = worst.max((sol.log_el - oracle).abs());
    }
    check(
        "inner solver vs scalar bisection",
        worst <= 1e-8,
        format!("largest log-EL gap {worst:.3e}"),
    )
}

fn quantile_vs_exact() -> Result<(), Error> {
    let mc = weighted_chisq_quantile(&[1.0], 0.10, 50_000, 11);
    let exact = chi2_quantile(0.90, 1.0);
    let rel = (mc - exact).abs() / exact;
    check(
        "calibrated quantile vs exact chi-squared",
        rel <= 0.02,
        format!("mc {mc} vs exact {exact}"),
    )
}

fn supervised_equals_sample_mean() -> Result<(), Error> {
    let mut rng = rep_rng(91, 0);
    let data = generate(
        Scenario::MeanInference,
        &ScenarioParams::default(),
        60,
        80,
        &mut rng,
    )?;
    let config = ProblemConfig::new(builtin_mean_model(), AuxSpec::None);
    let fitted = fit(&config, &data)?;
    let gap = (fitted.theta_hat[0] - data.labeled_y.mean()).abs();
    check(
        "supervised fit equals the sample mean",
        gap <= 1e-8,
        format!("gap {gap:.3e}"),
    )
}

fn safety_certificate_holds() -> Result<(), Error> {
    let mut rng = rep_rng(92, 0);
    let data = generate(
        Scenario::MeanInference,
        &ScenarioParams::default(),
        100,
        1000,
        &mut rng,
    )?;
    let config = ProblemConfig::new(
        builtin_mean_model(),
        AuxSpec::FixedBasis {
            degree: 1,
            include_interactions: true,
        },
    );
    let fitted = fit(&config, &data)?;
    let pilot = supervised_init(&data, &config.model, &config.controls)?;
    let aux = build_aux(&data, &config.model, &config.aux, Some(&pilot), config.seed)?;
    let report = inference_report(
        &data,
        &config.model,
        &aux,
        &fitted,
        config.alpha,
        config.seed,
        None,
        &config.controls,
    )?;
    let gap = report.safety.min_eig_gap.unwrap_or(0.0);
    check(
        "variance-reduction certificate",
        report.safety.satisfied && gap >= -1e-8,
        format!("min eigenvalue gap {gap:.3e}"),
    )
}

fn experiment_is_deterministic() -> Result<(), Error> {
    let spec = ExperimentSpec {
        scenario: Scenario::MeanInference,
        n: 50,
        m: 200,
        params: ScenarioParams::default(),
        methods: vec![MethodId::Supervised, MethodId::EpiBasis],
        replications: 3,
        alpha: 0.1,
        seed: 7,
    };
    let a = result_csv(&run_experiment(&spec)?);
    let b = result_csv(&run_experiment(&spec)?);
    check(
        "experiment bytes are reproducible",
        a == b,
        "two runs of the same spec differ".into(),
    )
}

pub fn run() -> Result<(), Error> {
    solver_vs_bisection()?;
    quantile_vs_exact()?;
    supervised_equals_sample_mean()?;
    safety_certificate_holds()?;
    experiment_is_deterministic()?;
    println!("selftest: 5 checks passed");
    Ok(())
}
