//! `prop1` and `backdoor-check`: ground-truth experiments whose outcome sets the exit status.

use causaldpo::causal::{
    amplification_scm, estimate_tables, gen_err_bound, interventional_enum, max_backdoor_deviation, run_amplification,
    scm_sample, shifted_pair, write_trajectory_csv, AmplificationConfig, AmplificationReport, BoundReport, CheckStatus,
    ScmSpec,
};
use causaldpo::divergence::tv_distance;
use causaldpo::rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::{failure, io};

/// Largest deviation tolerated between backdoor adjustment with the true tables and enumeration.
pub const EXACT_TOLERANCE: f64 = 1e-12;
/// Deviation expected from tables estimated on 100 000 samples; reported, not enforced.
pub const SAMPLED_TOLERANCE: f64 = 0.02;

#[derive(Debug, Serialize)]
struct BoundCheck<'a> {
    train_scm: &'a ScmSpec,
    test_scm: &'a ScmSpec,
    report: BoundReport,
}

#[derive(Debug, Serialize)]
struct Prop1Report<'a> {
    config: &'a AmplificationConfig,
    amplification: AmplificationReport,
    bound: BoundCheck<'a>,
}

fn failed(status: CheckStatus) -> bool {
    status == CheckStatus::Fail
}

/// Trajectory CSV and a report with the amplification checks and the generalization bound on
/// the task's SCM against a shifted copy. Exits with a check failure after writing both.
pub fn prop1(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let dir = cfg.output_dir().join("prop1");
    io::create_dir(&dir)?;
    let run = run_amplification(&cfg.prop1)?;
    write_trajectory_csv(io::create(&dir.join("trajectory.csv"))?, &run.trajectory)?;
    let train = amplification_scm(&cfg.prop1)?;
    let test = shifted_pair(&train, &mut rng::substream(cfg.seed, "shift"));
    let bound = gen_err_bound(&run.policy, &run.features, &train, &test, None)?;
    let a = run.report;
    let mut problems = Vec::new();
    if failed(a.monotonicity) {
        problems.push(format!("w_E stopped increasing at step {:?}", a.first_violation));
    }
    if failed(a.slope_check) {
        problems.push(format!("early slope off by {:.1}%", 100.0 * a.slope_rel_err));
    }
    if !bound.holds {
        problems.push(format!("gen_err {} exceeds bound {}", bound.gen_err, bound.bound_value));
    }
    let report = Prop1Report {
        config: &cfg.prop1,
        amplification: a,
        bound: BoundCheck {
            train_scm: &train,
            test_scm: &test,
            report: bound,
        },
    };
    io::write_json(&dir.join("report.json"), &report)?;
    if problems.is_empty() {
        Ok(())
    } else {
        Err(failure::check(problems.join("; ")))
    }
}

#[derive(Debug, Serialize)]
struct SampledCheck {
    samples: usize,
    deviation: f64,
    tolerance: f64,
    within_tolerance: bool,
}

#[derive(Debug, Serialize)]
struct BackdoorReport {
    n_env: usize,
    n_x: usize,
    n_y: usize,
    /// Per value of X, the largest componentwise gap with the true tables.
    exact_deviation_by_x: Vec<f64>,
    exact_deviation: f64,
    exact_tolerance: f64,
    sampled: Option<SampledCheck>,
    /// Largest TV distance between `p(Y|x)` and `p(Y|do(x))` over the X grid.
    max_confounding_tv: f64,
    unconfounded: bool,
}

pub fn backdoor(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let spec = cfg.scm()?;
    let dir = cfg.output_dir().join("backdoor");
    io::create_dir(&dir)?;
    let mut by_x = Vec::with_capacity(spec.n_x());
    let mut confounding = 0.0f64;
    for x in 0..spec.n_x() {
        let truth = interventional_enum(&spec, x)?;
        let est = causaldpo::causal::backdoor_estimate(&spec, &spec.env_prior, x)?;
        by_x.push(truth.iter().zip(&est).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        confounding = confounding.max(tv_distance(&spec.observational(x)?, &truth)?);
    }
    let exact = by_x.iter().copied().fold(0.0, f64::max);
    let sampled = if cfg.backdoor.samples > 0 {
        let samples = scm_sample(&spec, cfg.backdoor.samples, None, cfg.seed)?;
        let (prior, table) = estimate_tables(&samples, spec.n_env(), spec.n_x(), spec.n_y())?;
        let deviation = max_backdoor_deviation(&spec, &table, &prior)?;
        Some(SampledCheck {
            samples: cfg.backdoor.samples,
            deviation,
            tolerance: SAMPLED_TOLERANCE,
            within_tolerance: deviation <= SAMPLED_TOLERANCE,
        })
    } else {
        None
    };
    let report = BackdoorReport {
        n_env: spec.n_env(),
        n_x: spec.n_x(),
        n_y: spec.n_y(),
        exact_deviation_by_x: by_x,
        exact_deviation: exact,
        exact_tolerance: EXACT_TOLERANCE,
        sampled,
        max_confounding_tv: confounding,
        unconfounded: spec.n_env() == 1 || confounding <= EXACT_TOLERANCE,
    };
    io::write_json(&dir.join("report.json"), &report)?;
    if exact > EXACT_TOLERANCE {
        return Err(failure::check(format!(
            "backdoor adjustment deviates from enumeration by {exact:e} with the true tables"
        )));
    }
    Ok(())
}
