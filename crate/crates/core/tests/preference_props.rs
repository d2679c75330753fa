mod common;

use causaldpo::causal::{amplification_dataset, AmplificationConfig};
use causaldpo::linalg::Matrix;
use causaldpo::model::{freeze_reference, init_policy, Context, FeatureSpec, ParamGrad, PolicyFamily};
use causaldpo::preference::*;
use common::*;
use proptest::prelude::*;

const LN2: f64 = std::f64::consts::LN_2;

/// Two actions whose score gap is `w_E · e · 0.5`; a policy at `w_E = 2 Δ / β` against a
/// reference at `w_E = 0` has margin `Δ` on the triple `(x, 0, 1)`.
fn margin_fixture(margin: f64, beta: f64) -> (Vec<PreferenceTriple>, causaldpo::model::PolicyParams, ReferencePolicyAlias) {
    let spec = FeatureSpec::new(
        Matrix::from_rows(&[vec![0.5], vec![0.0]]).unwrap(),
        Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap(),
    )
    .unwrap();
    let base = init_policy(&spec, PolicyFamily::LogLinear, 3).unwrap();
    let reference = freeze_reference(&base);
    let mut policy = base;
    policy.w_env[0] = 2.0 * margin / beta;
    let batch = vec![PreferenceTriple::new(Context::new(vec![1.0], vec![0.4]), 0, 1)];
    (batch, policy, reference)
}

type ReferencePolicyAlias = causaldpo::model::ReferencePolicy;

#[test]
fn unit_margin_loss_value() {
    let (batch, policy, reference) = margin_fixture(1.0, 2.0);
    let m = reward_margin(&batch[0], &policy, &reference, 2.0).unwrap();
    assert!((m - 1.0).abs() < 1e-12, "margin {m}");
    let loss = dpo_loss(&batch, &policy, &reference, 2.0).unwrap();
    assert!((loss - 0.313262).abs() < 1e-6, "loss {loss}");
}

#[test]
fn saturated_margin_has_vanishing_loss_and_gradient() {
    let (batch, policy, reference) = margin_fixture(50.0, 2.0);
    let (loss, grad) = dpo_loss_and_grad(&batch, &policy, &reference, 2.0).unwrap();
    assert!(loss < 1e-20, "loss {loss}");
    assert!(grad.norm() < 1e-8, "grad norm {}", grad.norm());
}

#[test]
fn three_triple_accuracy() {
    let spec = FeatureSpec::new(
        Matrix::from_rows(&[vec![1.0], vec![0.0], vec![-1.0]]).unwrap(),
        Matrix::from_rows(&[vec![0.0], vec![0.0], vec![0.0]]).unwrap(),
    )
    .unwrap();
    let mut p = init_policy(&spec, PolicyFamily::LogLinear, 0).unwrap();
    p.w_env[0] = 1.0;
    let x = Context::new(vec![1.0], vec![0.0]);
    // Scores are (1, 0, -1) up to the bias.
    let batch = vec![
        PreferenceTriple::new(x.clone(), 0, 1),
        PreferenceTriple::new(x.clone(), 1, 2),
        PreferenceTriple::new(x.clone(), 2, 0),
    ];
    let acc = preference_accuracy(&batch, &p).unwrap();
    assert!((acc - 0.6667).abs() < 1e-4, "{acc}");
    p.w_env[0] = 0.0;
    assert_eq!(preference_accuracy(&batch, &p).unwrap(), 0.0);
}

#[test]
fn gradient_descent_on_one_weight_decreases_loss_every_step() {
    // Only w_E moves the softmax here: the task feature and bias are shared by all actions.
    let cfg = AmplificationConfig {
        n_triples: 200,
        ..Default::default()
    };
    let (spec, _, triples) = amplification_dataset(&cfg).unwrap();
    let mut p = init_policy(&spec, PolicyFamily::LogLinear, 0).unwrap();
    let reference = freeze_reference(&p);
    let mut prev = dpo_loss(&triples, &p, &reference, 2.0).unwrap();
    for step in 0..50 {
        let g = dpo_grad(&triples, &p, &reference, 2.0).unwrap();
        p.descend(&g, 0.05);
        let loss = dpo_loss(&triples, &p, &reference, 2.0).unwrap();
        assert!(loss < prev, "step {step}: {loss} >= {prev}");
        prev = loss;
    }
}

#[test]
fn empty_batch_is_rejected() {
    let spec = FeatureSpec::symmetric(1, 1, 2).unwrap();
    let p = init_policy(&spec, PolicyFamily::LogLinear, 0).unwrap();
    let r = freeze_reference(&p);
    assert!(dpo_loss(&[], &p, &r, 2.0).is_err());
    assert!(dpo_grad(&[], &p, &r, 2.0).is_err());
    assert!(preference_accuracy(&[], &p).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn loss_is_nonnegative_and_ln2_at_the_reference(seed in any::<u64>(), beta in 0.1f64..5.0) {
        let mut rng = rng_for(seed);
        let spec = random_spec(&mut rng);
        let family = random_family(&mut rng);
        let reference_params = random_policy(&mut rng, &spec, family, 1.0);
        let policy = random_policy(&mut rng, &spec, family, 1.0);
        let reference = freeze_reference(&reference_params);
        let batch = random_batch(&mut rng, &spec, 8);
        prop_assert!(dpo_loss(&batch, &policy, &reference, beta).unwrap() >= 0.0);
        let at_ref = dpo_loss(&batch, &reference_params, &reference, beta).unwrap();
        prop_assert_eq!(at_ref, LN2);
    }

    #[test]
    fn reward_matches_log_ratio(seed in any::<u64>(), beta in 0.1f64..5.0) {
        let mut rng = rng_for(seed);
        let spec = random_spec(&mut rng);
        let family = random_family(&mut rng);
        let p = random_policy(&mut rng, &spec, family, 1.0);
        let r = freeze_reference(&random_policy(&mut rng, &spec, family, 1.0));
        let x = random_context(&mut rng, &spec);
        for y in 0..spec.action_count {
            let expected = beta * (p.log_prob(&x, y).unwrap() - r.log_prob(&x, y).unwrap());
            prop_assert_eq!(reward(&p, &r, &x, y, beta).unwrap(), expected);
        }
    }

    #[test]
    fn dpo_gradient_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = rng_for(seed);
        let spec = random_spec(&mut rng);
        let family = random_family(&mut rng);
        let p = random_policy(&mut rng, &spec, family, 1.0);
        let r = freeze_reference(&random_policy(&mut rng, &spec, family, 1.0));
        let batch = random_batch(&mut rng, &spec, 6);
        let g = dpo_grad(&batch, &p, &r, 2.0).unwrap().flatten();
        let err = policy_fd_err(&p, &g, |q| dpo_loss(&batch, q, &r, 2.0).unwrap());
        prop_assert!(err <= FD_TOL, "relative error {err}");
    }

    #[test]
    fn zero_margin_gradient_closed_form(seed in any::<u64>(), beta in 0.1f64..5.0) {
        let mut rng = rng_for(seed);
        let spec = random_spec(&mut rng);
        let family = random_family(&mut rng);
        let p = random_policy(&mut rng, &spec, family, 1.0);
        let r = freeze_reference(&p);
        let batch = random_batch(&mut rng, &spec, 5);
        let g = dpo_grad(&batch, &p, &r, beta).unwrap();
        let mut expected = ParamGrad::zeros_like(&p);
        let n = batch.len() as f64;
        for t in &batch {
            expected.add_scaled(&p.log_prob_grad(&t.x, t.y_w).unwrap(), -beta / (2.0 * n));
            expected.add_scaled(&p.log_prob_grad(&t.x, t.y_l).unwrap(), beta / (2.0 * n));
        }
        for (a, b) in g.flatten().iter().zip(expected.flatten()) {
            prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn raising_the_preferred_score_never_raises_the_loss(seed in any::<u64>()) {
        // With one per-action offset feature, w_rest[y_w] lifts only the score of y_w.
        let mut rng = rng_for(seed);
        let n = 2 + (seed % 5) as usize;
        let spec = FeatureSpec::new(
            gauss_matrix(&mut rng, n, 1, 1.0),
            Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 }),
        ).unwrap();
        let p = random_policy(&mut rng, &spec, PolicyFamily::LogLinear, 1.0);
        let r = freeze_reference(&random_policy(&mut rng, &spec, PolicyFamily::LogLinear, 1.0));
        let mut t = random_triple(&mut rng, &spec);
        t.x.rest_features = vec![1.0; n];
        let batch = vec![t.clone()];
        let mut prev = f64::INFINITY;
        for k in 0..20 {
            let mut q = p.clone();
            q.w_rest[t.y_w] += 0.25 * k as f64;
            let loss = dpo_loss(&batch, &q, &r, 2.0).unwrap();
            prop_assert!(loss <= prev, "step {k}: {loss} > {prev}");
            prev = loss;
        }
    }

    #[test]
    fn positive_env_feature_gap_gives_negative_env_gradient(seed in any::<u64>(), beta in 0.1f64..5.0) {
        // At the reference every (1 − σ) is 1/2, so the w_E gradient is −β/2 · mean Δf_E.
        let mut rng = rng_for(seed);
        let n = 2 + (seed % 5) as usize;
        let spec = FeatureSpec::new(gauss_matrix(&mut rng, n, 1, 1.0), gauss_matrix(&mut rng, n, 2, 1.0)).unwrap();
        let p = random_policy(&mut rng, &spec, PolicyFamily::LogLinear, 1.0);
        let r = freeze_reference(&p);
        let batch = random_batch(&mut rng, &spec, 10);
        let gap: f64 = batch
            .iter()
            .map(|t| spec.env_features_of(&t.x, t.y_w)[0] - spec.env_features_of(&t.x, t.y_l)[0])
            .sum::<f64>() / batch.len() as f64;
        let g = dpo_grad(&batch, &p, &r, beta).unwrap();
        prop_assert!((g.w_env[0] + beta / 2.0 * gap).abs() <= 1e-12);
        if gap > 1e-9 {
            prop_assert!(g.w_env[0] < 0.0);
        }
    }

    #[test]
    fn jsonl_round_trip(seed in any::<u64>()) {
        let mut rng = rng_for(seed);
        let spec = random_spec(&mut rng);
        let mut batch = random_batch(&mut rng, &spec, 5);
        batch[0].env_label = Some(3);
        let mut buf = Vec::new();
        write_triples(&mut buf, &batch).unwrap();
        prop_assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), batch.len());
        let back = read_triples(&buf[..]).unwrap();
        prop_assert_eq!(back, batch);
    }
}

#[test]
fn jsonl_fields_are_flat() {
    let t = PreferenceTriple {
        x: Context::new(vec![1.0], vec![0.5, 2.0]),
        y_w: 1,
        y_l: 0,
        env_label: Some(1),
    };
    let mut buf = Vec::new();
    write_triples(&mut buf, &[t]).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
    for key in ["env_features", "rest_features", "y_w", "y_l", "env_label"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    let bad = br#"{"env_features":[1.0],"rest_features":[0.0],"y_w":1,"y_l":1}"#;
    assert!(read_triples(&bad[..]).is_err());
}
