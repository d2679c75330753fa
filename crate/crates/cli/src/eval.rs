//! `eval`: rank every item for each record of a partition and report HR/NDCG overall, by item
//! popularity group, and by time bucket.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use causaldpo::evalrec::{group_breakdown, hr_at_k, ndcg_at_k, time_breakdown, InteractionLog, Metric, RankedList};
use causaldpo::model::PolicyParams;
use causaldpo::preference::{preference_accuracy, read_triples};
use causaldpo::trainer::Checkpoint;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::{failure, io, train};

pub const METRICS: [Metric; 4] = [Metric::Hr(10), Metric::Hr(20), Metric::Ndcg(10), Metric::Ndcg(20)];

pub fn metric_name(m: Metric) -> String {
    match m {
        Metric::Hr(k) => format!("hr@{k}"),
        Metric::Ndcg(k) => format!("ndcg@{k}"),
    }
}

fn metric_value(lists: &[RankedList], m: Metric) -> causaldpo::Result<f64> {
    match m {
        Metric::Hr(k) => hr_at_k(lists, k),
        Metric::Ndcg(k) => ndcg_at_k(lists, k),
    }
}

#[derive(Debug, Serialize)]
pub struct BreakdownReport {
    pub counts: Vec<usize>,
    /// Metric name to per-bucket value; `null` for an empty bucket.
    pub values: BTreeMap<String, Vec<Option<f64>>>,
}

#[derive(Debug, Serialize)]
pub struct MetricsReport {
    pub partition: String,
    pub records: usize,
    pub preference_accuracy: f64,
    pub metrics: BTreeMap<String, f64>,
    /// Equal-mass item popularity groups over the training partition, head first.
    pub popularity_groups: BreakdownReport,
    /// Equal-count timestamp buckets, oldest first.
    pub time_buckets: BreakdownReport,
}

/// A policy file, or the policy inside a checkpoint.
pub fn load_policy(path: &Path) -> anyhow::Result<PolicyParams> {
    let v: serde_json::Value = io::read_json(path)?;
    let policy = if v.get("policy").is_some() && v.get("config").is_some() {
        serde_json::from_value::<Checkpoint>(v).map(|c| c.policy)
    } else {
        serde_json::from_value::<PolicyParams>(v)
    }
    .map_err(|e| failure::config(format!("{}: {e}", path.display())))?;
    policy.validate()?;
    Ok(policy)
}

fn read_log(path: &Path) -> anyhow::Result<InteractionLog> {
    InteractionLog::read_csv(io::open(path)?).with_context(|| format!("reading {}", path.display()))
}

pub fn evaluate(cfg: &ExperimentConfig, policy: &PolicyParams) -> anyhow::Result<MetricsReport> {
    let dir = cfg.data_dir();
    let name = &cfg.eval.partition;
    let log = read_log(&dir.join(format!("{name}.csv")))?;
    let triples_path = dir.join(format!("{name}.jsonl"));
    let triples = read_triples(io::open(&triples_path)?).with_context(|| format!("reading {}", triples_path.display()))?;
    if log.is_empty() {
        return Err(failure::config(format!("partition {name} is empty; nothing to evaluate")));
    }
    if triples.len() != log.len() {
        return Err(failure::config(format!(
            "partition {name}: {} records but {} triples",
            log.len(),
            triples.len()
        )));
    }
    let mut lists = Vec::with_capacity(log.len());
    for (r, t) in log.records.iter().zip(&triples) {
        if t.y_w as u64 != r.item_id {
            return Err(failure::config(format!("partition {name}: triple and record disagree on the item")));
        }
        let scores = policy.scores(&t.x)?;
        let pairs: Vec<(u64, f64)> = scores.iter().enumerate().map(|(i, s)| (i as u64, *s)).collect();
        lists.push(RankedList::from_scores(&pairs, r.item_id));
    }
    let popularity_log = read_log(&dir.join("train.csv"))?;
    let timestamps: Vec<i64> = log.records.iter().map(|r| r.timestamp).collect();
    let mut metrics = BTreeMap::new();
    let mut groups = BreakdownReport {
        counts: Vec::new(),
        values: BTreeMap::new(),
    };
    let mut times = BreakdownReport {
        counts: Vec::new(),
        values: BTreeMap::new(),
    };
    for m in METRICS {
        metrics.insert(metric_name(m), metric_value(&lists, m)?);
        let g = group_breakdown(&lists, &popularity_log, m, cfg.eval.groups)?;
        groups.counts = g.counts;
        groups.values.insert(metric_name(m), g.values);
        let t = time_breakdown(&lists, &timestamps, m, cfg.eval.time_buckets)?;
        times.counts = t.counts;
        times.values.insert(metric_name(m), t.values);
    }
    Ok(MetricsReport {
        partition: name.clone(),
        records: log.len(),
        preference_accuracy: preference_accuracy(&triples, policy)?,
        metrics,
        popularity_groups: groups,
        time_buckets: times,
    })
}

/// `metric,breakdown,bucket,value,count` rows; the overall value has an empty bucket.
fn write_csv(path: &Path, report: &MetricsReport) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(io::create(path)?);
    w.write_record(["metric", "breakdown", "bucket", "value", "count"])?;
    for (name, v) in &report.metrics {
        w.write_record([name.as_str(), "all", "", &v.to_string(), &report.records.to_string()])?;
    }
    for (label, b) in [("popularity", &report.popularity_groups), ("time", &report.time_buckets)] {
        for (name, values) in &b.values {
            for (i, v) in values.iter().enumerate() {
                let value = v.map(|x| x.to_string()).unwrap_or_default();
                w.write_record([name.as_str(), label, &i.to_string(), &value, &b.counts[i].to_string()])?;
            }
        }
    }
    w.flush().with_context(|| format!("writing {}", path.display()))
}

fn eval_into(cfg: &ExperimentConfig, policy_path: &Path, out: &Path) -> anyhow::Result<()> {
    let policy = load_policy(policy_path)?;
    let report = evaluate(cfg, &policy)?;
    io::create_dir(out)?;
    io::write_json(&out.join("metrics.json"), &report)?;
    write_csv(&out.join("metrics.csv"), &report)
}

pub fn run(cfg: &ExperimentConfig, jobs: usize) -> anyhow::Result<()> {
    let root = cfg.output_dir().join("eval");
    if let Some(p) = &cfg.eval.policy {
        return eval_into(cfg, p, &root);
    }
    let jobs_list: Vec<(PathBuf, PathBuf)> = cfg
        .sweep_seeds()
        .into_iter()
        .map(|s| (train::run_dir(cfg, s).join(train::POLICY), root.join(format!("seed-{s}"))))
        .collect();
    io::for_each(&jobs_list, jobs, |(policy, out)| eval_into(cfg, policy, out))?;
    Ok(())
}
