mod common;

use causaldpo::causal::*;
use causaldpo::divergence::tv_distance;
use causaldpo::linalg::Matrix;
use causaldpo::model::{init_policy, FeatureSpec, PolicyFamily};
use common::*;
use proptest::prelude::*;
use rand::Rng as _;

fn random_sized_scm(rng: &mut causaldpo::rng::Rng) -> ScmSpec {
    let (e, x, y) = (rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(2..=5));
    random_scm(e, x, y, rng)
}

fn policy_for(spec: &ScmSpec, rng: &mut causaldpo::rng::Rng) -> (causaldpo::model::PolicyParams, FeatureMap) {
    let env_dim = rng.random_range(1..3);
    let rest_dim = rng.random_range(1..3);
    let features = random_feature_map(spec, env_dim, rest_dim, rng);
    let fs = FeatureSpec::new(
        gauss_matrix(rng, spec.n_y(), env_dim, 1.0),
        gauss_matrix(rng, spec.n_y(), rest_dim, 1.0),
    )
    .unwrap();
    let p = random_policy(rng, &fs, PolicyFamily::LogLinear, 1.0);
    (p, features)
}

#[test]
fn sampling_frequencies_match_tables() {
    let spec = ScmSpec {
        env_prior: vec![0.4, 0.6],
        x_given_e: vec![vec![0.5, 0.5], vec![0.2, 0.8]],
        y_given_xe: vec![
            vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.3, 0.6]],
            vec![vec![0.3, 0.3, 0.4], vec![0.25, 0.5, 0.25]],
        ],
    };
    let samples = scm_sample(&spec, 100_000, None, 4).unwrap();
    assert_eq!(samples, scm_sample(&spec, 100_000, None, 4).unwrap());
    let cell: Vec<_> = samples.iter().filter(|s| s.e == 1 && s.x == 0).collect();
    for y in 0..3 {
        let f = cell.iter().filter(|s| s.y == y).count() as f64 / cell.len() as f64;
        assert!((f - spec.y_given_xe[1][0][y]).abs() <= 0.01, "y={y}: {f}");
    }
    let fe = samples.iter().filter(|s| s.e == 0).count() as f64 / samples.len() as f64;
    assert!((fe - 0.4).abs() <= 0.01);
    assert!(scm_sample(&spec, 0, None, 4).unwrap().is_empty());
    let over = scm_sample(&spec, 20_000, Some(&[1.0, 0.0]), 4).unwrap();
    assert!(over.iter().all(|s| s.e == 0));
}

#[test]
fn invalid_tables_are_rejected() {
    let bad = ScmSpec {
        env_prior: vec![0.5, 0.6],
        x_given_e: vec![vec![1.0], vec![1.0]],
        y_given_xe: vec![vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5]]],
    };
    assert!(scm_sample(&bad, 10, None, 0).is_err());
    assert!(interventional_enum(&bad, 0).is_err());
}

#[test]
fn unconfounded_cases() {
    let mut rng = rng_for(2);
    let single = random_scm(1, 3, 4, &mut rng);
    for x in 0..3 {
        assert_eq!(interventional_enum(&single, x).unwrap(), single.y_given_xe[0][x]);
    }
    let mut shared = random_scm(3, 2, 3, &mut rng);
    let row = shared.y_given_xe[0].clone();
    for e in 0..3 {
        shared.y_given_xe[e] = row.clone();
    }
    for x in 0..2 {
        let v = interventional_enum(&shared, x).unwrap();
        for (a, b) in v.iter().zip(&row[x]) {
            assert!((a - b).abs() < 1e-15);
        }
    }
    let two = random_scm(2, 2, 3, &mut rng);
    let half = backdoor_estimate(&two, &[0.5, 0.5], 1).unwrap();
    for y in 0..3 {
        assert!((half[y] - 0.5 * (two.y_given_xe[0][1][y] + two.y_given_xe[1][1][y])).abs() < 1e-15);
    }
    assert!(backdoor_estimate(&two, &[1.0], 0).is_err());
}

#[test]
fn unbiased_amplification_shows_no_systematic_growth() {
    let biased = run_amplification(&AmplificationConfig::default()).unwrap();
    let flat = run_amplification(&AmplificationConfig {
        bias_strength: 0.0,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(flat.report.monotonicity, CheckStatus::NotApplicable);
    assert_eq!(flat.report.slope_check, CheckStatus::NotApplicable);
    assert!(
        flat.report.final_w_e.abs() < 0.05 * biased.report.final_w_e,
        "{} vs {}",
        flat.report.final_w_e,
        biased.report.final_w_e
    );
}

#[test]
fn trajectory_csv_columns() {
    let run = run_amplification(&AmplificationConfig { steps: 3, ..Default::default() }).unwrap();
    let mut buf = Vec::new();
    write_trajectory_csv(&mut buf, &run.trajectory).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "step,w_E,delta_E,loss,mean_sigma");
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn supplied_constant_below_feature_bound_is_rejected() {
    let mut rng = rng_for(9);
    let train = random_scm(2, 3, 3, &mut rng);
    let test = shifted_pair(&train, &mut rng);
    let (p, f) = policy_for(&train, &mut rng);
    let report = gen_err_bound(&p, &f, &train, &test, None).unwrap();
    assert!(gen_err_bound(&p, &f, &train, &test, Some(report.c * 0.5)).is_err());
    assert!(gen_err_bound(&p, &f, &train, &test, Some(report.c * 2.0)).unwrap().holds);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn backdoor_with_true_tables_is_exact(seed in any::<u64>()) {
        let mut rng = rng_for(seed);
        let spec = random_sized_scm(&mut rng);
        for x in 0..spec.n_x() {
            let truth = interventional_enum(&spec, x).unwrap();
            let est = backdoor_estimate(&spec, &spec.env_prior, x).unwrap();
            prop_assert!((truth.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            // Independent sum in the opposite environment order.
            for y in 0..spec.n_y() {
                let hand: f64 = (0..spec.n_env()).rev().map(|e| spec.y_given_xe[e][x][y] * spec.env_prior[e]).sum();
                prop_assert!((truth[y] - hand).abs() <= 1e-12);
                prop_assert!((est[y] - truth[y]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn random_scms_exhibit_confounding(seed in any::<u64>()) {
        let mut rng = rng_for(seed);
        let n_env = rng.random_range(2..=4);
        let spec = random_scm(n_env, rng.random_range(2..=5), rng.random_range(2..=5), &mut rng);
        let worst = (0..spec.n_x())
            .map(|x| tv_distance(&spec.observational(x).unwrap(), &interventional_enum(&spec, x).unwrap()).unwrap())
            .fold(0.0, f64::max);
        prop_assert!(worst > 0.0);
    }

    #[test]
    fn bound_holds_and_vanishes_without_shift_or_weight(seed in any::<u64>()) {
        let mut rng = rng_for(seed);
        let train = random_sized_scm(&mut rng);
        let test = shifted_pair(&train, &mut rng);
        let (mut p, f) = policy_for(&train, &mut rng);
        let r = gen_err_bound(&p, &f, &train, &test, None).unwrap();
        prop_assert!(r.holds && r.gen_err <= r.bound_value + 1e-15, "{:?}", r);
        let same = gen_err_bound(&p, &f, &train, &train, None).unwrap();
        prop_assert_eq!(same.gen_err, 0.0);
        prop_assert_eq!(same.tv_mean, 0.0);
        p.w_env.iter_mut().for_each(|w| *w = 0.0);
        let zero = gen_err_bound(&p, &f, &train, &test, None).unwrap();
        prop_assert_eq!(zero.gen_err, 0.0);
        prop_assert_eq!(zero.bound_value, 0.0);
        prop_assert_eq!(empirical_gen_err(&p, &f, &train, &test, 100, seed).unwrap(), 0.0);
    }
}

#[test]
fn monte_carlo_gen_err_tracks_enumeration() {
    let mut rng = rng_for(21);
    for _ in 0..5 {
        let train = random_scm(3, 4, 3, &mut rng);
        let test = shifted_pair(&train, &mut rng);
        let (p, f) = policy_for(&train, &mut rng);
        let exact = gen_err_exact(&p, &f, &train, &test).unwrap();
        let mc = empirical_gen_err(&p, &f, &train, &test, 50_000, 3).unwrap();
        assert!((exact - mc).abs() <= 0.01, "{exact} vs {mc}");
        assert!(empirical_gen_err(&p, &f, &train, &train, 50_000, 3).unwrap() <= 0.01);
    }
}

#[test]
fn estimated_tables_are_close_to_truth() {
    let mut rng = rng_for(33);
    let spec = random_scm(2, 3, 3, &mut rng);
    let samples = scm_sample(&spec, 100_000, None, 1).unwrap();
    let (prior, table) = estimate_tables(&samples, 2, 3, 3).unwrap();
    assert!(max_backdoor_deviation(&spec, &table, &prior).unwrap() <= 0.02);
    assert!(max_backdoor_deviation(&spec, &spec, &spec.env_prior).unwrap() <= 1e-12);
}

#[test]
fn scm_json_round_trip() {
    let mut rng = rng_for(1);
    let spec = random_scm(2, 3, 4, &mut rng);
    let back: ScmSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
    assert_eq!(back, spec);
    let fm = FeatureMap {
        env_embed: Matrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap(),
        x_embed: Matrix::zeros(3, 1),
    };
    let p = init_policy(&FeatureSpec::symmetric(1, 1, 4).unwrap(), PolicyFamily::LogLinear, 0).unwrap();
    let cond = PolicyConditional { policy: &p, features: &fm };
    let row = backdoor_estimate(&cond, &[0.5, 0.5], 2).unwrap();
    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn amplification_scm_matches_the_dataset() {
    let cfg = AmplificationConfig {
        n_triples: 60_000,
        ..Default::default()
    };
    let scm = amplification_scm(&cfg).unwrap();
    let (_, features, triples) = amplification_dataset(&cfg).unwrap();
    assert_eq!((scm.n_env(), scm.n_x(), scm.n_y()), (features.env_embed.rows(), features.x_embed.rows(), 6));
    for e in 0..2 {
        let ys: Vec<usize> = triples.iter().filter(|t| t.env_label == Some(e)).map(|t| t.y_w).collect();
        for y in 0..6 {
            let f = ys.iter().filter(|&&v| v == y).count() as f64 / ys.len() as f64;
            assert!((f - scm.y_given_xe[e][0][y]).abs() <= 0.01, "e={e} y={y}: {f}");
        }
    }
}
