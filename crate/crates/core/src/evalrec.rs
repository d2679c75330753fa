//! Interaction logs, distribution-shift splits and single-target ranking metrics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: u64,
    pub item_id: u64,
    pub timestamp: i64,
    pub rating: f64,
    /// Which OOD pool a record came from; empty outside OOD partitions.
    #[serde(default)]
    pub origin: Option<String>,
}

impl Interaction {
    pub fn new(user_id: u64, item_id: u64, timestamp: i64, rating: f64) -> Self {
        Self {
            user_id,
            item_id,
            timestamp,
            rating,
            origin: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
}

impl InteractionLog {
    pub fn new(records: Vec<Interaction>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Interaction count per item.
    pub fn popularity(&self) -> BTreeMap<u64, usize> {
        let mut pop = BTreeMap::new();
        for r in &self.records {
            *pop.entry(r.item_id).or_insert(0) += 1;
        }
        pop
    }

    /// Reads CSV with header `user_id,item_id,timestamp,rating[,origin]`.
    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let records = rdr.deserialize().collect::<std::result::Result<Vec<Interaction>, _>>()?;
        Ok(Self { records })
    }

    /// Writes CSV with header `user_id,item_id,timestamp,rating,origin`.
    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        if self.records.is_empty() {
            w.write_record(["user_id", "item_id", "timestamp", "rating", "origin"])?;
        }
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shift {
    Popularity,
    Temporal,
    Exposure,
    Mixed,
    Iid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub shift: Shift,
    /// train / valid / iid-test.
    pub ratios: [f64; 3],
    pub ood_fraction: f64,
    /// Shares of the mixed OOD set drawn from the popularity and temporal pools.
    pub mixed_weights: [f64; 2],
    pub min_interactions: usize,
    /// Keep only records with `rating > threshold`.
    pub rating_threshold: Option<f64>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            shift: Shift::Popularity,
            ratios: [0.7, 0.1, 0.2],
            ood_fraction: 0.2,
            mixed_weights: [0.8, 0.2],
            min_interactions: 20,
            rating_threshold: None,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let sum_ok = |v: &[f64]| (v.iter().sum::<f64>() - 1.0).abs() < 1e-9 && v.iter().all(|r| *r >= 0.0);
        if !sum_ok(&self.ratios) {
            return Err(Error::InvalidConfig("split ratios must be nonnegative and sum to 1".into()));
        }
        if !sum_ok(&self.mixed_weights) {
            return Err(Error::InvalidConfig("mixed weights must be nonnegative and sum to 1".into()));
        }
        if !(self.ood_fraction > 0.0 && self.ood_fraction < 1.0) {
            return Err(Error::InvalidConfig("ood_fraction must lie in (0, 1)".into()));
        }
        if self.min_interactions < 1 {
            return Err(Error::InvalidConfig("min_interactions must be >= 1".into()));
        }
        Ok(())
    }
}

pub const ORIGIN_POPULARITY: &str = "popularity";
pub const ORIGIN_TEMPORAL: &str = "temporal";
pub const ORIGIN_EXPOSURE: &str = "exposure";

#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    pub train: InteractionLog,
    pub valid: InteractionLog,
    pub iid_test: InteractionLog,
    pub ood_test: InteractionLog,
    pub dropped_users: usize,
    pub kept_users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub iid_test: usize,
    pub ood_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: SplitSpec,
    pub seed: u64,
    pub counts: SplitCounts,
    pub dropped_users: usize,
    pub kept_users: usize,
    pub ood_origins: BTreeMap<String, usize>,
}

impl SplitResult {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train.len(),
            valid: self.valid.len(),
            iid_test: self.iid_test.len(),
            ood_test: self.ood_test.len(),
        }
    }

    pub fn ood_origins(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for r in &self.ood_test.records {
            if let Some(o) = &r.origin {
                *m.entry(o.clone()).or_insert(0) += 1;
            }
        }
        m
    }

    pub fn manifest(&self, spec: &SplitSpec, seed: u64) -> SplitManifest {
        SplitManifest {
            spec: spec.clone(),
            seed,
            counts: self.counts(),
            dropped_users: self.dropped_users,
            kept_users: self.kept_users,
            ood_origins: self.ood_origins(),
        }
    }

    /// Hash over every partition's records, in order.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for part in [&self.train, &self.valid, &self.iid_test, &self.ood_test] {
            part.records.len().hash(&mut h);
            for r in &part.records {
                (r.user_id, r.item_id, r.timestamp, r.rating.to_bits(), &r.origin).hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Apply the rating filter and drop users below `min_interactions`. Returns per-user record
/// indices sorted by `(timestamp, item_id)`, users in ascending id order.
fn eligible_users(log: &InteractionLog, spec: &SplitSpec) -> (Vec<Vec<usize>>, usize) {
    let mut by_user: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, r) in log.records.iter().enumerate() {
        if spec.rating_threshold.is_none_or(|t| r.rating > t) {
            by_user.entry(r.user_id).or_default().push(i);
        }
    }
    let mut dropped = 0;
    let mut kept = Vec::new();
    for (_, mut idx) in by_user {
        if idx.len() < spec.min_interactions {
            dropped += 1;
            continue;
        }
        idx.sort_by_key(|&i| (log.records[i].timestamp, log.records[i].item_id, i));
        kept.push(idx);
    }
    (kept, dropped)
}

/// Number of records of an `n`-record user that form its latest OOD slice.
fn latest_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).min(n)
}

/// Item-balanced sample of `target` records: every item contributes up to a common level `L`
/// (water-filling), ties for the remainder broken by a seeded item order. Records within an item
/// are chosen uniformly.
fn water_fill(log: &InteractionLog, pool: &[usize], target: usize, rng: &mut rng::Rng) -> Vec<usize> {
    let mut by_item: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for &i in pool {
        by_item.entry(log.records[i].item_id).or_default().push(i);
    }
    let target = target.min(pool.len());
    let mut items: Vec<(u64, Vec<usize>)> = by_item.into_iter().collect();
    for (_, recs) in &mut items {
        recs.shuffle(rng);
    }
    // Largest L with Σ min(c_i, L) ≤ target, then hand out the remainder one record per item.
    let mut quota: Vec<usize> = vec![0; items.len()];
    let mut remaining = target;
    loop {
        let open: Vec<usize> = (0..items.len()).filter(|&j| quota[j] < items[j].1.len()).collect();
        if remaining == 0 || open.is_empty() {
            break;
        }
        let per = remaining / open.len();
        if per == 0 {
            let mut order = open;
            order.shuffle(rng);
            for &j in order.iter().take(remaining) {
                quota[j] += 1;
            }
            break;
        }
        for &j in &open {
            let add = per.min(items[j].1.len() - quota[j]);
            quota[j] += add;
            remaining -= add;
        }
    }
    let mut out: Vec<usize> = items
        .iter()
        .zip(&quota)
        .flat_map(|((_, recs), &q)| recs[..q].iter().copied())
        .collect();
    out.sort_unstable();
    out
}

/// Per-user `ratios` split of the records not in `excluded`, after a seeded shuffle.
fn iid_partition(
    users: &[Vec<usize>],
    excluded: &HashSet<usize>,
    ratios: [f64; 3],
    rng: &mut rng::Rng,
) -> [Vec<usize>; 3] {
    let mut parts: [Vec<usize>; 3] = Default::default();
    for idx in users {
        let mut rest: Vec<usize> = idx.iter().copied().filter(|i| !excluded.contains(i)).collect();
        rest.shuffle(rng);
        let n = rest.len();
        let n_train = ((n as f64 * ratios[0]).round() as usize).min(n);
        let n_valid = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
        parts[0].extend_from_slice(&rest[..n_train]);
        parts[1].extend_from_slice(&rest[n_train..n_train + n_valid]);
        parts[2].extend_from_slice(&rest[n_train + n_valid..]);
    }
    parts
}

fn collect(log: &InteractionLog, idx: &[usize], origin: Option<&str>) -> InteractionLog {
    InteractionLog::new(
        idx.iter()
            .map(|&i| {
                let mut r = log.records[i].clone();
                r.origin = origin.map(str::to_owned);
                r
            })
            .collect(),
    )
}

/// Split without an exposure table; the exposure shift is rejected.
pub fn split(log: &InteractionLog, spec: &SplitSpec, seed: u64) -> Result<SplitResult> {
    split_with_exposure(log, None, spec, seed)
}

/// Build train / valid / iid-test / OOD-test partitions.
///
/// * popularity: an item-balanced sample of `ood_fraction` of all records.
/// * temporal: each user's latest `ood_fraction` of records.
/// * exposure: OOD is the supplied full-exposure table (restricted to retained users).
/// * mixed: `mixed_weights` of the OOD budget from the popularity and temporal pools.
/// * iid: no OOD partition.
///
/// Remaining records are split per user by `ratios`.
pub fn split_with_exposure(
    log: &InteractionLog,
    exposure: Option<&InteractionLog>,
    spec: &SplitSpec,
    seed: u64,
) -> Result<SplitResult> {
    spec.validate()?;
    let (users, dropped_users) = eligible_users(log, spec);
    if users.is_empty() {
        return Err(Error::EmptyInput("no user meets min_interactions"));
    }
    let mut rng = rng::substream(seed, "split");
    let all: Vec<usize> = users.iter().flatten().copied().collect();
    let total = all.len();
    let mut ood = InteractionLog::default();
    let mut excluded: HashSet<usize> = HashSet::new();

    match spec.shift {
        Shift::Iid => {}
        Shift::Temporal => {
            let latest: Vec<usize> = users
                .iter()
                .flat_map(|idx| idx[idx.len() - latest_count(idx.len(), spec.ood_fraction)..].iter().copied())
                .collect();
            excluded.extend(&latest);
            ood = collect(log, &latest, Some(ORIGIN_TEMPORAL));
        }
        Shift::Popularity => {
            let target = (total as f64 * spec.ood_fraction).round() as usize;
            let picked = water_fill(log, &all, target, &mut rng);
            excluded.extend(&picked);
            ood = collect(log, &picked, Some(ORIGIN_POPULARITY));
        }
        Shift::Mixed => {
            let budget = (total as f64 * spec.ood_fraction).round() as usize;
            let n_pop = (budget as f64 * spec.mixed_weights[0]).round() as usize;
            let n_temp = budget - n_pop;
            let mut temporal_pool: Vec<usize> = users
                .iter()
                .flat_map(|idx| idx[idx.len() - latest_count(idx.len(), spec.ood_fraction)..].iter().copied())
                .collect();
            let pool_set: HashSet<usize> = temporal_pool.iter().copied().collect();
            temporal_pool.shuffle(&mut rng);
            let mut temporal: Vec<usize> = temporal_pool.into_iter().take(n_temp).collect();
            temporal.sort_unstable();
            let pop_pool: Vec<usize> = all.iter().copied().filter(|i| !pool_set.contains(i)).collect();
            let popularity = water_fill(log, &pop_pool, n_pop, &mut rng);
            if popularity.len() != n_pop || temporal.len() != n_temp {
                return Err(Error::InvalidConfig("log too small for the mixed OOD budget".into()));
            }
            excluded.extend(&temporal);
            excluded.extend(&popularity);
            ood = collect(log, &popularity, Some(ORIGIN_POPULARITY));
            ood.records.extend(collect(log, &temporal, Some(ORIGIN_TEMPORAL)).records);
        }
        Shift::Exposure => {
            let table = exposure.ok_or_else(|| {
                Error::InvalidConfig("exposure shift needs a full-exposure table".into())
            })?;
            let kept: HashSet<u64> = users.iter().map(|idx| log.records[idx[0]].user_id).collect();
            ood = InteractionLog::new(
                table
                    .records
                    .iter()
                    .filter(|r| kept.contains(&r.user_id))
                    .map(|r| Interaction {
                        origin: Some(ORIGIN_EXPOSURE.into()),
                        ..r.clone()
                    })
                    .collect(),
            );
        }
    }

    let [train, valid, test] = iid_partition(&users, &excluded, spec.ratios, &mut rng);
    Ok(SplitResult {
        train: collect(log, &train, None),
        valid: collect(log, &valid, None),
        iid_test: collect(log, &test, None),
        ood_test: ood,
        dropped_users,
        kept_users: users.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupBasis {
    /// Groups hold equal shares of total interaction mass.
    EqualMass,
    /// Groups hold equal numbers of items.
    EqualCount,
}

/// Popularity group per item, 0 = most popular. Items are ordered by descending interaction
/// count, ties by ascending id.
pub fn popularity_groups(pop: &BTreeMap<u64, usize>, groups: usize, basis: GroupBasis) -> Result<HashMap<u64, usize>> {
    if groups == 0 {
        return Err(Error::InvalidConfig("groups must be >= 1".into()));
    }
    if pop.len() < groups {
        return Err(Error::InvalidConfig(format!(
            "{} distinct items cannot fill {groups} groups",
            pop.len()
        )));
    }
    let mut items: Vec<(u64, usize)> = pop.iter().map(|(&i, &c)| (i, c)).collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let total: usize = items.iter().map(|x| x.1).sum();
    let n = items.len();
    let mut out = HashMap::with_capacity(n);
    let mut cum = 0usize;
    for (rank, (item, count)) in items.into_iter().enumerate() {
        let g = match basis {
            GroupBasis::EqualCount => rank * groups / n,
            // Group by the midpoint of each item's mass interval.
            GroupBasis::EqualMass => {
                let mid = cum as f64 + count as f64 / 2.0;
                ((mid / total.max(1) as f64) * groups as f64).floor() as usize
            }
        };
        cum += count;
        out.insert(item, g.min(groups - 1));
    }
    Ok(out)
}

/// `max / min` of per-group record counts in `sample`; infinite if a group is empty.
pub fn group_mass_ratio(sample: &InteractionLog, item_groups: &HashMap<u64, usize>, groups: usize) -> f64 {
    let mut mass = vec![0usize; groups];
    for r in &sample.records {
        if let Some(&g) = item_groups.get(&r.item_id) {
            mass[g] += 1;
        }
    }
    let max = *mass.iter().max().unwrap_or(&0) as f64;
    let min = *mass.iter().min().unwrap_or(&0) as f64;
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Items in descending score order plus the single relevant item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub items: Vec<u64>,
    pub target: u64,
}

impl RankedList {
    /// 1-based rank of the target, if present.
    pub fn rank(&self) -> Option<usize> {
        self.items.iter().position(|&i| i == self.target).map(|p| p + 1)
    }

    /// Rank items by descending score; ties by ascending id.
    pub fn from_scores(scores: &[(u64, f64)], target: u64) -> Self {
        let mut s = scores.to_vec();
        s.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Self {
            items: s.into_iter().map(|x| x.0).collect(),
            target,
        }
    }
}

fn check_metric_input(lists: &[RankedList], k: usize) -> Result<()> {
    if lists.is_empty() {
        return Err(Error::EmptyInput("ranked lists"));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    Ok(())
}

/// Fraction of lists with the target in the top `k`.
pub fn hr_at_k(lists: &[RankedList], k: usize) -> Result<f64> {
    check_metric_input(lists, k)?;
    let hits = lists.iter().filter(|l| l.rank().is_some_and(|r| r <= k)).count();
    Ok(hits as f64 / lists.len() as f64)
}

/// Mean of `1 / log₂(rank + 1)` over lists with the target in the top `k`, zero otherwise.
pub fn ndcg_at_k(lists: &[RankedList], k: usize) -> Result<f64> {
    check_metric_input(lists, k)?;
    let total: f64 = lists
        .iter()
        .filter_map(|l| l.rank().filter(|&r| r <= k))
        .map(|r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    Ok(total / lists.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "name", content = "k")]
pub enum Metric {
    Hr(usize),
    Ndcg(usize),
}

impl Metric {
    pub fn eval(&self, lists: &[RankedList]) -> Result<f64> {
        match *self {
            Metric::Hr(k) => hr_at_k(lists, k),
            Metric::Ndcg(k) => ndcg_at_k(lists, k),
        }
    }
}

/// Metric per bucket; `None` where a bucket holds no query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub values: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

fn bucketed(lists: &[RankedList], bucket_of: impl Fn(usize, &RankedList) -> usize, n: usize, metric: Metric) -> Result<Breakdown> {
    let mut buckets: Vec<Vec<RankedList>> = vec![Vec::new(); n];
    for (i, l) in lists.iter().enumerate() {
        buckets[bucket_of(i, l).min(n - 1)].push(l.clone());
    }
    let counts = buckets.iter().map(Vec::len).collect();
    let values = buckets
        .iter()
        .map(|b| if b.is_empty() { Ok(None) } else { metric.eval(b).map(Some) })
        .collect::<Result<_>>()?;
    Ok(Breakdown { values, counts })
}

/// Metric per equal-mass popularity group of the target item (G1 = head).
pub fn group_breakdown(lists: &[RankedList], log: &InteractionLog, metric: Metric, groups: usize) -> Result<Breakdown> {
    if lists.is_empty() {
        return Err(Error::EmptyInput("ranked lists"));
    }
    let item_groups = popularity_groups(&log.popularity(), groups, GroupBasis::EqualMass)?;
    // Targets never seen in the log fall in the tail group.
    bucketed(lists, |_, l| item_groups.get(&l.target).copied().unwrap_or(groups - 1), groups, metric)
}

/// Metric per equal-count timestamp bucket (oldest first); `timestamps[i]` belongs to `lists[i]`.
pub fn time_breakdown(lists: &[RankedList], timestamps: &[i64], metric: Metric, buckets: usize) -> Result<Breakdown> {
    if lists.is_empty() {
        return Err(Error::EmptyInput("ranked lists"));
    }
    crate::error::check_dim("timestamps", lists.len(), timestamps.len())?;
    if buckets == 0 {
        return Err(Error::InvalidConfig("buckets must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..lists.len()).collect();
    order.sort_by_key(|&i| (timestamps[i], i));
    let mut bucket = vec![0usize; lists.len()];
    for (rank, &i) in order.iter().enumerate() {
        bucket[i] = rank * buckets / lists.len();
    }
    bucketed(lists, |i, _| bucket[i], buckets, metric)
}
