//! Fixtures and oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use causaldpo::environments::{cluster_count, ExtractorParams};
use causaldpo::linalg::Matrix;
use causaldpo::model::{freeze_reference, init_policy_with, Context, FeatureSpec, PolicyFamily, PolicyParams, ReferencePolicy};
use causaldpo::trainer::{PenaltyValues, StepFrame, TrainConfig};
use causaldpo::preference::PreferenceTriple;
use causaldpo::rng::{self, Rng};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor for relative errors, per unit of `max(1, |f|)`. Central differences carry
/// rounding noise near `ε |f| / h ≈ 2e-11 |f|`, so a coordinate whose true derivative is zero
/// is judged against that noise instead of against zero.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rng_for(seed: u64) -> Rng {
    rng::substream(seed, "test")
}

pub fn gauss(rng: &mut Rng, std: f64) -> f64 {
    Normal::new(0.0, std).expect("valid normal").sample(rng)
}

pub fn gauss_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| gauss(rng, std)).collect()
}

pub fn gauss_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| gauss(rng, std))
}

pub fn random_spec(rng: &mut Rng) -> FeatureSpec {
    let env_dim = rng.random_range(1..=3);
    let rest_dim = rng.random_range(1..=4);
    let actions = rng.random_range(2..=7);
    FeatureSpec::new(
        gauss_matrix(rng, actions, env_dim, 1.0),
        gauss_matrix(rng, actions, rest_dim, 1.0),
    )
    .expect("valid spec")
}

pub fn random_context(rng: &mut Rng, spec: &FeatureSpec) -> Context {
    Context::new(gauss_vec(rng, spec.env_dim, 1.0), gauss_vec(rng, spec.rest_dim, 1.0))
}

/// Every parameter drawn from `N(0, std²)`, including `w_E`.
pub fn random_policy(rng: &mut Rng, spec: &FeatureSpec, family: PolicyFamily, std: f64) -> PolicyParams {
    let hidden = rng.random_range(2..=5);
    let mut p = init_policy_with(spec, family, hidden, rng.random()).expect("valid init");
    let flat = gauss_vec(rng, p.n_params(), std);
    p.set_flat(&flat).expect("matching length");
    p
}

pub fn random_family(rng: &mut Rng) -> PolicyFamily {
    if rng.random::<bool>() {
        PolicyFamily::LogLinear
    } else {
        PolicyFamily::ShallowNonlinear
    }
}

pub fn random_triple(rng: &mut Rng, spec: &FeatureSpec) -> PreferenceTriple {
    let n = spec.action_count;
    let y_w = rng.random_range(0..n);
    let mut y_l = rng.random_range(0..n - 1);
    if y_l >= y_w {
        y_l += 1;
    }
    PreferenceTriple::new(random_context(rng, spec), y_w, y_l)
}

pub fn random_batch(rng: &mut Rng, spec: &FeatureSpec, n: usize) -> Vec<PreferenceTriple> {
    (0..n).map(|_| random_triple(rng, spec)).collect()
}

/// Central differences of `f` at `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest coordinatewise `|a − b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Finite-difference check of `analytic = ∇f(x)`.
pub fn fd_err(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    let floor = REL_FLOOR * f(x).abs().max(1.0);
    max_rel_err(analytic, &central_diff(&f, x, FD_STEP), floor)
}

/// Finite-difference check of a policy gradient: `f` is evaluated at perturbed copies of `p`.
pub fn policy_fd_err(p: &PolicyParams, analytic: &[f64], f: impl Fn(&PolicyParams) -> f64) -> f64 {
    fd_err(
        |v| {
            let mut q = p.clone();
            q.set_flat(v).expect("matching length");
            f(&q)
        },
        &p.flatten(),
        analytic,
    )
}

/// Random points in `dim` dimensions, `n_per` around each of `centers`, spread `std`.
pub fn blobs(rng: &mut Rng, centers: &[Vec<f64>], n_per: usize, std: f64) -> Vec<Vec<f64>> {
    centers
        .iter()
        .flat_map(|c| (0..n_per).map(|_| c.iter().map(|v| v + gauss(rng, std)).collect::<Vec<_>>()).collect::<Vec<_>>())
        .collect()
}

/// Random probability vector with entries bounded away from zero.
pub fn random_simplex(rng: &mut Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// Core points, their connected components under `eps`, and the noise set, by brute force.
pub struct DensityReference {
    pub core: Vec<bool>,
    /// Component id per core point.
    pub component: Vec<Option<usize>>,
    pub noise: Vec<bool>,
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn density_reference(points: &[Vec<f64>], eps: f64, min_pts: usize) -> DensityReference {
    let n = points.len();
    let near = |i: usize, j: usize| dist(&points[i], &points[j]) <= eps;
    let core: Vec<bool> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts).collect();
    let mut component = vec![None; n];
    let mut next = 0;
    for s in 0..n {
        if !core[s] || component[s].is_some() {
            continue;
        }
        let mut stack = vec![s];
        component[s] = Some(next);
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if core[j] && component[j].is_none() && near(i, j) {
                    component[j] = Some(next);
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    let noise = (0..n).map(|i| !core[i] && !(0..n).any(|j| core[j] && near(i, j))).collect();
    DensityReference { core, component, noise }
}

/// Labels satisfy density reachability: noise matches, core components map one-to-one onto
/// clusters, and every border point joins the cluster of some core point within `eps`.
pub fn check_against_reference(points: &[Vec<f64>], labels: &[Option<usize>], eps: f64, min_pts: usize) -> Result<(), String> {
    let r = density_reference(points, eps, min_pts);
    let n = points.len();
    for i in 0..n {
        if r.noise[i] != labels[i].is_none() {
            return Err(format!("point {i}: noise {} vs label {:?}", r.noise[i], labels[i]));
        }
    }
    let mut pairs = BTreeSet::new();
    for i in (0..n).filter(|&i| r.core[i]) {
        pairs.insert((r.component[i].unwrap(), labels[i].unwrap()));
    }
    let comps: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
    let clusters: BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
    if comps.len() != pairs.len() || clusters.len() != pairs.len() {
        return Err("core components and clusters are not in bijection".into());
    }
    if cluster_count(labels) != pairs.len() {
        return Err("a cluster holds no core point".into());
    }
    for i in (0..n).filter(|&i| !r.core[i] && !r.noise[i]) {
        let ok = (0..n).any(|j| r.core[j] && dist(&points[i], &points[j]) <= eps && labels[j] == labels[i]);
        if !ok {
            return Err(format!("border point {i} not attached to a core neighbour"));
        }
    }
    Ok(())
}

/// Policy, extractor, frame and config for checking the step objective on a random problem.
pub struct StepCase {
    pub batch: Vec<PreferenceTriple>,
    pub policy: PolicyParams,
    pub reference: ReferencePolicy,
    pub extractor: ExtractorParams,
    pub frame: StepFrame,
    pub cfg: TrainConfig,
}

pub fn step_case(seed: u64) -> StepCase {
    let mut rng = rng_for(seed);
    let spec = random_spec(&mut rng);
    let family = random_family(&mut rng);
    let policy = random_policy(&mut rng, &spec, family, 0.7);
    let reference = freeze_reference(&random_policy(&mut rng, &spec, family, 0.7));
    let n = rng.random_range(4..10);
    let batch = random_batch(&mut rng, &spec, n);
    let d = policy.repr_dim();
    let d_out = rng.random_range(1..=d);
    let mut extractor = ExtractorParams::init(d, d_out, seed).unwrap();
    extractor.b_g = gauss_vec(&mut rng, d_out, 0.5);
    let k = rng.random_range(2..=3);
    let frame = StepFrame {
        centers: gauss_matrix(&mut rng, k, d_out, 1.0),
        sigma: rng.random_range(0.3..2.0),
    };
    let mode = if rng.random_bool(0.5) {
        PenaltyValues::ChosenLogProb
    } else {
        PenaltyValues::HiddenState
    };
    let cfg = TrainConfig {
        lambda: rng.random_range(0.1..3.0),
        distance_scale: rng.random_range(0.5..2.0),
        penalty_values: mode,
        ..Default::default()
    };
    StepCase {
        batch,
        policy,
        reference,
        extractor,
        frame,
        cfg,
    }
}

pub fn extractor_flat(g: &ExtractorParams) -> Vec<f64> {
    let mut v = g.w_g.as_slice().to_vec();
    v.extend_from_slice(&g.b_g);
    v
}

pub fn extractor_from_flat(like: &ExtractorParams, flat: &[f64]) -> ExtractorParams {
    let mut g = like.clone();
    let n = g.w_g.as_slice().len();
    g.w_g.as_mut_slice().copy_from_slice(&flat[..n]);
    g.b_g.copy_from_slice(&flat[n..]);
    g
}
