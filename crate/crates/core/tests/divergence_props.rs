mod common;

use causaldpo::divergence::*;
use causaldpo::linalg::Matrix;
use common::*;
use proptest::prelude::*;
use rand::Rng as _;

fn random_set(rng: &mut causaldpo::rng::Rng, n: usize, dim: usize) -> EnvSampleSet {
    let values = (0..n).map(|_| gauss_vec(rng, dim, 1.0)).collect();
    let weights = (0..n).map(|_| rng.random_range(0.05..2.0)).collect();
    EnvSampleSet::new(values, weights)
}

/// Weighted biased V-statistic by three explicit double loops.
fn naive_mmd2(a: &EnvSampleSet, b: &EnvSampleSet, sigma: f64) -> f64 {
    let k = |x: &[f64], y: &[f64]| {
        let d2: f64 = x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum();
        (-d2 / (2.0 * sigma * sigma)).exp()
    };
    let mean = |s: &EnvSampleSet, t: &EnvSampleSet| {
        let (ws, wt): (f64, f64) = (s.weights.iter().sum(), t.weights.iter().sum());
        let mut acc = 0.0;
        for (x, wx) in s.values.iter().zip(&s.weights) {
            for (y, wy) in t.values.iter().zip(&t.weights) {
                acc += wx * wy * k(x, y);
            }
        }
        acc / (ws * wt)
    };
    mean(a, a) + mean(b, b) - 2.0 * mean(a, b)
}

#[test]
fn kernel_at_one_bandwidth() {
    let v = gaussian_kernel(&[0.0, 0.0], &[0.6, 0.8], 1.0);
    assert!((v - 0.606531).abs() < 1e-6);
    assert_eq!(gaussian_kernel(&[1.5], &[1.5], 0.3), 1.0);
}

#[test]
fn singleton_closed_form_and_derivative() {
    let sigma = 0.7;
    for x in [0.1, 0.7, 1.3, 2.5] {
        let a = EnvSampleSet::scalars(&[0.0], vec![1.0]);
        let b = EnvSampleSet::scalars(&[x], vec![1.0]);
        let cfg = KernelConfig::fixed(sigma);
        let e = (-x * x / (2.0 * sigma * sigma)).exp();
        assert!((mmd2_weighted(&a, &b, &cfg).unwrap() - (2.0 - 2.0 * e)).abs() < 1e-12);
        let g = mmd2_grad(&a, &b, &cfg).unwrap();
        let expected = 2.0 * x / (sigma * sigma) * e;
        assert!((g.d_values_b[0][0] - expected).abs() < 1e-12);
    }
    let a = EnvSampleSet::scalars(&[0.0], vec![1.0]);
    let b = EnvSampleSet::scalars(&[1.0], vec![1.0]);
    assert!((mmd2_weighted(&a, &b, &KernelConfig::fixed(1.0)).unwrap() - 0.786939).abs() < 1e-6);
}

#[test]
fn median_bandwidth_examples() {
    assert_eq!(median_bandwidth(&[vec![0.0], vec![1.0], vec![3.0]]), 2.0);
    assert_eq!(median_bandwidth(&[vec![0.0, 0.0], vec![3.0, 4.0]]), 5.0);
    assert_eq!(median_bandwidth(&[vec![2.0], vec![2.0], vec![2.0]]), FALLBACK_BANDWIDTH);
}

#[test]
fn tv_examples() {
    assert_eq!(tv_distance(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
    assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
    assert!((tv_distance(&[0.6, 0.4], &[0.3, 0.7]).unwrap() - 0.3).abs() < 1e-15);
    assert!(tv_distance(&[0.6, 0.6], &[0.5, 0.5]).is_err());
}

#[test]
fn tv_is_a_metric_on_random_triples() {
    let mut rng = rng_for(5);
    for _ in 0..100 {
        let n = rng.random_range(2..6);
        let (p, q, r) = (random_simplex(&mut rng, n), random_simplex(&mut rng, n), random_simplex(&mut rng, n));
        let d = |a: &[f64], b: &[f64]| tv_distance(a, b).unwrap();
        assert_eq!(d(&p, &q), d(&q, &p));
        assert_eq!(d(&p, &p), 0.0);
        assert!(d(&p, &r) <= d(&p, &q) + d(&q, &r) + 1e-15);
        assert!((0.0..=1.0).contains(&d(&p, &q)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kernel_is_symmetric_and_bounded(seed in any::<u64>(), sigma in 0.05f64..5.0) {
        let mut rng = rng_for(seed);
        let dim = rng.random_range(1..4);
        let (a, b) = (gauss_vec(&mut rng, dim, 2.0), gauss_vec(&mut rng, dim, 2.0));
        let k = gaussian_kernel(&a, &b, sigma);
        prop_assert_eq!(k.to_bits(), gaussian_kernel(&b, &a, sigma).to_bits());
        prop_assert!(k > 0.0 || a != b);
        prop_assert!(k <= 1.0);
    }

    #[test]
    fn median_bandwidth_matches_pair_enumeration(seed in any::<u64>()) {
        let mut rng = rng_for(seed);
        let n = rng.random_range(2..12);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| gauss_vec(&mut rng, 2, 1.0)).collect();
        let mut d = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                d.push(((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt());
            }
        }
        d.sort_by(f64::total_cmp);
        let m = d.len();
        let expected = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
        prop_assert!((median_bandwidth(&pts) - expected).abs() <= 1e-12);
    }

    #[test]
    fn weighted_mmd_matches_double_loop(seed in any::<u64>(), sigma in 0.2f64..3.0) {
        let mut rng = rng_for(seed);
        let dim = rng.random_range(1..4);
        let (na, nb) = (rng.random_range(1..8), rng.random_range(1..8));
        let a = random_set(&mut rng, na, dim);
        let b = random_set(&mut rng, nb, dim);
        let got = mmd2_weighted(&a, &b, &KernelConfig::fixed(sigma)).unwrap();
        prop_assert!((got - naive_mmd2(&a, &b, sigma)).abs() <= 1e-12);
    }

    #[test]
    fn mmd_is_nonnegative_symmetric_and_scale_free(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut rng = rng_for(seed);
        let a = random_set(&mut rng, 6, 2);
        let b = random_set(&mut rng, 5, 2);
        let cfg = KernelConfig::default();
        let ab = mmd2_weighted(&a, &b, &cfg).unwrap();
        prop_assert!(ab >= -1e-12);
        prop_assert!((ab - mmd2_weighted(&b, &a, &cfg).unwrap()).abs() <= 1e-12);
        let scaled = EnvSampleSet::new(a.values.clone(), a.weights.iter().map(|w| w * c).collect());
        prop_assert!((mmd2_weighted(&scaled, &b, &cfg).unwrap() - ab).abs() <= 1e-12);
        prop_assert!(mmd2_weighted(&a, &a, &cfg).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn identical_sets_have_zero_gradient(seed in any::<u64>()) {
        let mut rng = rng_for(seed);
        let a = random_set(&mut rng, 5, 2);
        let g = mmd2_grad(&a, &a.clone(), &KernelConfig::fixed(1.0)).unwrap();
        prop_assert!(g.value.abs() <= 1e-12);
        for v in g.d_values_a.iter().chain(&g.d_values_b).flatten().chain(&g.d_weights_a).chain(&g.d_weights_b) {
            prop_assert!(v.abs() <= 1e-12);
        }
    }

    #[test]
    fn mmd_gradient_matches_finite_differences(seed in any::<u64>(), sigma in 0.3f64..3.0) {
        let mut rng = rng_for(seed);
        let dim = rng.random_range(1..4);
        let (na, nb) = (rng.random_range(1..6), rng.random_range(1..6));
        let a = random_set(&mut rng, na, dim);
        let b = random_set(&mut rng, nb, dim);
        let cfg = KernelConfig::fixed(sigma);
        let g = mmd2_grad(&a, &b, &cfg).unwrap();
        // Parameter vector: values of a, values of b, weights of a, weights of b.
        let pack = |s: &EnvSampleSet| s.values.iter().flatten().copied().collect::<Vec<_>>();
        let mut x = pack(&a);
        x.extend(pack(&b));
        x.extend(&a.weights);
        x.extend(&b.weights);
        let unpack = |v: &[f64]| {
            let mut it = v.iter().copied();
            let mut take = |n: usize| (0..n).map(|_| it.next().unwrap()).collect::<Vec<f64>>();
            let va: Vec<Vec<f64>> = (0..na).map(|_| take(dim)).collect();
            let vb: Vec<Vec<f64>> = (0..nb).map(|_| take(dim)).collect();
            let wa = take(na);
            let wb = take(nb);
            (EnvSampleSet::new(va, wa), EnvSampleSet::new(vb, wb))
        };
        let mut analytic: Vec<f64> = g.d_values_a.iter().flatten().copied().collect();
        analytic.extend(g.d_values_b.iter().flatten());
        analytic.extend(&g.d_weights_a);
        analytic.extend(&g.d_weights_b);
        let err = fd_err(|v| { let (p, q) = unpack(v); mmd2_weighted(&p, &q, &cfg).unwrap() }, &x, &analytic);
        prop_assert!(err <= FD_TOL, "relative error {err}");
    }

    #[test]
    fn pairwise_penalty_is_order_free_and_sums_pairs(seed in any::<u64>()) {
        let mut rng = rng_for(seed);
        let envs: Vec<EnvSampleSet> = (0..3).map(|_| random_set(&mut rng, 4, 1)).collect();
        let cfg = KernelConfig::fixed(0.8);
        let total = pairwise_mmd_penalty(&envs, &cfg).unwrap();
        let pairs: f64 = [(0, 1), (0, 2), (1, 2)]
            .iter()
            .map(|&(i, j)| naive_mmd2(&envs[i], &envs[j], 0.8))
            .sum();
        prop_assert!((total - pairs).abs() <= 1e-12);
        let reordered = vec![envs[2].clone(), envs[0].clone(), envs[1].clone()];
        prop_assert!((pairwise_mmd_penalty(&reordered, &cfg).unwrap() - total).abs() <= 1e-12);
        prop_assert_eq!(pairwise_mmd_penalty(&envs[..1], &cfg).unwrap(), 0.0);
        let two = pairwise_mmd_penalty(&envs[..2], &cfg).unwrap();
        prop_assert!((two - mmd2_weighted(&envs[0], &envs[1], &cfg).unwrap()).abs() <= 1e-15);
    }

    #[test]
    fn shared_sample_penalty_matches_pairwise_and_its_gradient(seed in any::<u64>(), root in any::<bool>()) {
        let mut rng = rng_for(seed);
        let n = rng.random_range(2..9);
        let k = rng.random_range(1..4);
        let dim = rng.random_range(1..3);
        let values: Vec<Vec<f64>> = (0..n).map(|_| gauss_vec(&mut rng, dim, 1.0)).collect();
        let weights = Matrix::from_rows(&(0..n).map(|_| random_simplex(&mut rng, k)).collect::<Vec<_>>()).unwrap();
        let form = if root { MmdForm::Root } else { MmdForm::Squared };
        let sigma = 0.9;
        let pen = shared_sample_penalty(&values, &weights, sigma, form).unwrap();
        prop_assert_eq!(pen.kernel_evals, n * n);
        let envs: Vec<EnvSampleSet> = (0..k)
            .map(|c| EnvSampleSet::new(values.clone(), (0..n).map(|i| weights.get(i, c)).collect()))
            .collect();
        let cfg = KernelConfig { form, ..KernelConfig::fixed(sigma) };
        prop_assert!((pen.value - pairwise_mmd_penalty(&envs, &cfg).unwrap()).abs() <= 1e-12);

        let mut x: Vec<f64> = values.iter().flatten().copied().collect();
        x.extend(weights.as_slice());
        let f = |v: &[f64]| {
            let vals: Vec<Vec<f64>> = v[..n * dim].chunks(dim).map(<[f64]>::to_vec).collect();
            let w = Matrix::from_fn(n, k, |i, c| v[n * dim + i * k + c]);
            shared_sample_penalty(&vals, &w, sigma, form).unwrap().value
        };
        let mut analytic: Vec<f64> = pen.d_values.iter().flatten().copied().collect();
        analytic.extend(pen.d_weights.as_slice());
        // The root form is not differentiable where a pair's discrepancy is zero.
        if !root || envs.len() < 2 || pen.value > 1e-6 {
            let err = fd_err(f, &x, &analytic);
            prop_assert!(err <= FD_TOL, "relative error {err}");
        }
    }
}

#[test]
fn zero_mass_and_mismatched_tv_are_errors() {
    let a = EnvSampleSet::scalars(&[0.0, 1.0], vec![0.0, 0.0]);
    let b = EnvSampleSet::scalars(&[0.0], vec![1.0]);
    assert!(mmd2_weighted(&a, &b, &KernelConfig::default()).is_err());
    assert!(tv_distance(&[1.0], &[0.5, 0.5]).is_err());
}
