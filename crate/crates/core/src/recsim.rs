//! Synthetic confounded recommendation task.
//!
//! Users carry a taste vector `u` and a latent environment `e`. In the exposure-biased
//! environment item popularity inflates interaction probability:
//!
//! ```text
//! p(y | u, e) ∝ exp(τ u·a_y + γ · lp_y · [e = biased])
//! ```
//!
//! where `a_y` is the item's taste vector and `lp_y` its centered log popularity. The policy sees
//! `E` only through a noisy imprint, and `f_E(y, E) = E · lp_y`, so a policy can fit the
//! environment-specific popularity effect through `w_E`. Under a popularity-balanced test set that
//! effect no longer pays off.

use std::collections::hash_map::Entry;
use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalrec::{Interaction, InteractionLog, RankedList};
use crate::linalg::{softmax, Matrix};
use crate::model::{Context, FeatureSpec, PolicyParams};
use crate::preference::PreferenceTriple;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecSimConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub taste_dim: usize,
    pub interactions_per_user: usize,
    /// Probability that a user belongs to the exposure-biased environment.
    pub p_biased: f64,
    /// τ.
    pub taste_strength: f64,
    /// γ.
    pub popularity_strength: f64,
    /// Zipf exponent of the base popularity curve.
    pub zipf: f64,
    /// Value of the environment imprint for biased users (0 for the others).
    pub env_imprint: f64,
    /// Standard deviation of per-user noise on the imprint.
    pub imprint_jitter: f64,
    /// Standard deviation of user taste vectors.
    pub user_taste_std: f64,
    /// Context carries `u · s` and items carry `a / s`; scores are unchanged, but a small `s`
    /// keeps taste from dominating distances between contexts.
    pub taste_feature_scale: f64,
    pub seed: u64,
}

impl Default for RecSimConfig {
    fn default() -> Self {
        Self {
            n_users: 300,
            n_items: 40,
            taste_dim: 2,
            interactions_per_user: 25,
            p_biased: 0.5,
            taste_strength: 1.5,
            popularity_strength: 1.5,
            zipf: 1.0,
            env_imprint: 3.0,
            imprint_jitter: 0.1,
            user_taste_std: 0.5,
            taste_feature_scale: 0.1,
            seed: 0,
        }
    }
}

impl RecSimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users < 1 || self.n_items < 2 || self.taste_dim < 1 || self.interactions_per_user < 1 {
            return Err(Error::InvalidConfig(
                "recsim needs n_users >= 1, n_items >= 2, taste_dim >= 1, interactions_per_user >= 1".into(),
            ));
        }
        if !(self.taste_feature_scale > 0.0 && self.taste_feature_scale.is_finite()) {
            return Err(Error::InvalidConfig("taste_feature_scale must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_biased) {
            return Err(Error::InvalidConfig("p_biased must lie in [0, 1]".into()));
        }
        for (name, v) in [
            ("taste_strength", self.taste_strength),
            ("popularity_strength", self.popularity_strength),
            ("zipf", self.zipf),
            ("env_imprint", self.env_imprint),
            ("imprint_jitter", self.imprint_jitter),
            ("user_taste_std", self.user_taste_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimUser {
    pub env: usize,
    pub imprint: f64,
    pub taste: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecSim {
    pub config: RecSimConfig,
    pub users: Vec<SimUser>,
    /// `n_items × taste_dim`.
    pub item_taste: Matrix,
    /// Centered log popularity per item.
    pub item_log_pop: Vec<f64>,
    pub spec: FeatureSpec,
    pub log: InteractionLog,
}

pub const ENV_NEUTRAL: usize = 0;
pub const ENV_BIASED: usize = 1;

impl RecSim {
    pub fn generate(config: &RecSimConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::substream(config.seed, "data");
        let std = Normal::new(0.0, 1.0).expect("valid normal");
        let raw: Vec<f64> = (0..config.n_items).map(|r| -(config.zipf * ((r + 1) as f64).ln())).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let item_log_pop: Vec<f64> = raw.iter().map(|v| v - mean).collect();
        let item_taste = Matrix::from_fn(config.n_items, config.taste_dim, |_, _| std.sample(&mut rng));
        let users: Vec<SimUser> = (0..config.n_users)
            .map(|_| {
                let env = if rng.random::<f64>() < config.p_biased { ENV_BIASED } else { ENV_NEUTRAL };
                let base = if env == ENV_BIASED { config.env_imprint } else { 0.0 };
                SimUser {
                    env,
                    imprint: base + config.imprint_jitter * std.sample(&mut rng),
                    taste: (0..config.taste_dim)
                        .map(|_| config.user_taste_std * std.sample(&mut rng))
                        .collect(),
                }
            })
            .collect();
        let spec = FeatureSpec::new(
            Matrix::from_fn(config.n_items, 1, |y, _| item_log_pop[y]),
            Matrix::from_fn(config.n_items, config.taste_dim, |y, j| {
                item_taste.get(y, j) / config.taste_feature_scale
            }),
        )?;
        let mut sim = Self {
            config: config.clone(),
            users,
            item_taste,
            item_log_pop,
            spec,
            log: InteractionLog::default(),
        };
        let mut records = Vec::with_capacity(config.n_users * config.interactions_per_user);
        for u in 0..config.n_users {
            let dist = sim.item_distribution(u, sim.users[u].env)?;
            for k in 0..config.interactions_per_user {
                let item = dist.sample(&mut rng);
                records.push(Interaction::new(u as u64, item as u64, sim.timestamp(u, k), 1.0));
            }
        }
        sim.log = InteractionLog::new(records);
        Ok(sim)
    }

    /// Timestamps interleave users so that later interactions are later in global time.
    fn timestamp(&self, user: usize, k: usize) -> i64 {
        (k * self.config.n_users + user) as i64
    }

    /// True `p(y | u, e)`.
    pub fn item_probs(&self, user: usize, env: usize) -> Vec<f64> {
        let u = &self.users[user];
        let logits: Vec<f64> = (0..self.config.n_items)
            .map(|y| {
                let taste: f64 = u.taste.iter().zip(self.item_taste.row(y)).map(|(a, b)| a * b).sum();
                let pop = if env == ENV_BIASED { self.item_log_pop[y] } else { 0.0 };
                self.config.taste_strength * taste + self.config.popularity_strength * pop
            })
            .collect();
        softmax(&logits)
    }

    fn item_distribution(&self, user: usize, env: usize) -> Result<WeightedIndex<f64>> {
        WeightedIndex::new(self.item_probs(user, env)).map_err(|e| Error::InvalidTable(e.to_string()))
    }

    pub fn context(&self, user: usize) -> Context {
        let u = &self.users[user];
        let s = self.config.taste_feature_scale;
        Context::new(vec![u.imprint], u.taste.iter().map(|t| t * s).collect())
    }

    fn user_index(&self, user_id: u64) -> Result<usize> {
        let u = user_id as usize;
        if u < self.users.len() {
            Ok(u)
        } else {
            Err(Error::UnknownValue(format!("user {user_id}")))
        }
    }

    /// One triple per record: `y_w` the interacted item, `y_l` uniform over the other items.
    pub fn triples(&self, log: &InteractionLog, seed: u64) -> Result<Vec<PreferenceTriple>> {
        let mut rng = rng::substream(seed, "negatives");
        let n = self.config.n_items;
        log.records
            .iter()
            .map(|r| {
                let u = self.user_index(r.user_id)?;
                let y_w = r.item_id as usize;
                let mut y_l = rng.random_range(0..n - 1);
                if y_l >= y_w {
                    y_l += 1;
                }
                Ok(PreferenceTriple {
                    x: self.context(u),
                    y_w,
                    y_l,
                    env_label: Some(self.users[u].env),
                })
            })
            .collect()
    }

    /// Counterfactual records with the exposure bias removed (`do(E = neutral)`), `per_user` per user,
    /// timestamped after the factual log.
    pub fn exposure_table(&self, per_user: usize, seed: u64) -> Result<InteractionLog> {
        let mut rng = rng::substream(seed, "exposure");
        let mut records = Vec::with_capacity(self.users.len() * per_user);
        for u in 0..self.users.len() {
            let dist = self.item_distribution(u, ENV_NEUTRAL)?;
            for k in 0..per_user {
                let item = dist.sample(&mut rng);
                let t = self.timestamp(u, self.config.interactions_per_user + k);
                records.push(Interaction::new(u as u64, item as u64, t, 1.0));
            }
        }
        Ok(InteractionLog::new(records))
    }

    /// Rank every item for the record's user; the target is the record's item.
    pub fn ranked_list(&self, policy: &PolicyParams, record: &Interaction) -> Result<RankedList> {
        let u = self.user_index(record.user_id)?;
        let scores = policy.scores(&self.context(u))?;
        let pairs: Vec<(u64, f64)> = scores.iter().enumerate().map(|(i, s)| (i as u64, *s)).collect();
        Ok(RankedList::from_scores(&pairs, record.item_id))
    }

    pub fn ranked_lists(&self, policy: &PolicyParams, log: &InteractionLog) -> Result<Vec<RankedList>> {
        // Scores depend only on the user, so rank once per user.
        let mut cache: HashMap<u64, Vec<(u64, f64)>> = HashMap::new();
        log.records
            .iter()
            .map(|r| {
                let u = self.user_index(r.user_id)?;
                let pairs = match cache.entry(r.user_id) {
                    Entry::Occupied(e) => e.into_mut(),
                    Entry::Vacant(e) => {
                        let s = policy.scores(&self.context(u))?;
                        e.insert(s.iter().enumerate().map(|(i, v)| (i as u64, *v)).collect())
                    }
                };
                Ok(RankedList::from_scores(pairs, r.item_id))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_shaped() {
        let cfg = RecSimConfig {
            n_users: 30,
            ..Default::default()
        };
        let a = RecSim::generate(&cfg).unwrap();
        let b = RecSim::generate(&cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 30 * 25);
        assert!(a.item_log_pop.iter().sum::<f64>().abs() < 1e-12);
        let t = a.triples(&a.log, 1).unwrap();
        assert!(t.iter().all(|t| t.y_w != t.y_l && t.y_l < 40));
    }

    #[test]
    fn biased_users_prefer_popular_items() {
        let sim = RecSim::generate(&RecSimConfig::default()).unwrap();
        let mut head = [0usize; 2];
        let mut total = [0usize; 2];
        for r in &sim.log.records {
            let env = sim.users[r.user_id as usize].env;
            total[env] += 1;
            if r.item_id < 5 {
                head[env] += 1;
            }
        }
        let rate = |e: usize| head[e] as f64 / total[e] as f64;
        assert!(rate(ENV_BIASED) > 2.0 * rate(ENV_NEUTRAL), "{} vs {}", rate(1), rate(0));
    }
}
