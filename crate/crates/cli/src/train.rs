//! `train`: one run per sweep seed under `train/seed-<s>/`, with a record stream, a checkpoint
//! after every epoch, the final policy, and a summary.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use causaldpo::model::FeatureSpec;
use causaldpo::preference::{read_triples, PreferenceTriple};
use causaldpo::trainer::{summarize, Checkpoint, RunRecord, Trainer};

use crate::config::ExperimentConfig;
use crate::{failure, io};

pub const RECORDS: &str = "records.jsonl";
pub const ENVS: &str = "envs.jsonl";
pub const POLICY: &str = "policy.json";
pub const SUMMARY: &str = "summary.json";
pub const CHECKPOINTS: &str = "checkpoints";

pub fn run_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.output_dir().join("train").join(format!("seed-{seed}"))
}

pub fn checkpoint_path(dir: &Path, epochs_done: usize) -> PathBuf {
    dir.join(CHECKPOINTS).join(format!("epoch-{epochs_done:04}.json"))
}

pub fn load_training_data(cfg: &ExperimentConfig) -> anyhow::Result<(FeatureSpec, Vec<PreferenceTriple>)> {
    let dir = cfg.data_dir();
    let spec: FeatureSpec = io::read_json(&dir.join("feature_spec.json"))?;
    let path = dir.join("train.jsonl");
    let triples = read_triples(io::open(&path)?).with_context(|| format!("reading {}", path.display()))?;
    Ok((spec, triples))
}

fn write_lines(w: &mut impl Write, lines: &[String]) -> anyhow::Result<()> {
    for l in lines {
        writeln!(w, "{l}")?;
    }
    Ok(())
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> anyhow::Result<Vec<String>> {
    items.iter().map(|x| Ok(serde_json::to_string(x)?)).collect()
}

/// Runs `trainer` to the end, starting the record and snapshot streams from `prior_*`.
fn drive(mut trainer: Trainer, dir: &Path, prior_records: Vec<String>, prior_envs: Vec<String>) -> anyhow::Result<()> {
    io::create_dir(&dir.join(CHECKPOINTS))?;
    let dump = trainer.config().dump_envs;
    let mut records_out = io::create(&dir.join(RECORDS))?;
    write_lines(&mut records_out, &prior_records)?;
    let mut envs_out = if dump {
        let mut w = io::create(&dir.join(ENVS))?;
        write_lines(&mut w, &prior_envs)?;
        Some(w)
    } else {
        None
    };
    let epochs = trainer.config().epochs;
    while !trainer.is_finished() {
        let records = trainer.run_epoch()?;
        write_lines(&mut records_out, &jsonl(&records)?)?;
        records_out.flush()?;
        if let Some(w) = envs_out.as_mut() {
            write_lines(w, &jsonl(&trainer.take_snapshots())?)?;
            w.flush()?;
        }
        let ckpt = trainer.checkpoint();
        io::write_json(&checkpoint_path(dir, ckpt.round * epochs + ckpt.epoch), &ckpt)?;
    }
    drop(records_out);
    io::write_json(&dir.join(POLICY), trainer.policy())?;
    let all = read_records(&dir.join(RECORDS))?;
    io::write_json(&dir.join(SUMMARY), &summarize(&trainer, &all)?)
}

fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    io::open(path)?
        .lines()
        .map(|l| l.with_context(|| format!("reading {}", path.display())))
        .collect()
}

fn read_records(path: &Path) -> anyhow::Result<Vec<RunRecord>> {
    read_lines(path)?
        .iter()
        .map(|l| serde_json::from_str(l).map_err(|e| failure::config(format!("{}: {e}", path.display()))))
        .collect()
}

/// Lines of a JSONL stream whose `step` precedes `step`.
fn lines_before(path: &Path, step: u64) -> anyhow::Result<Vec<String>> {
    let mut keep = Vec::new();
    for line in read_lines(path)? {
        let v: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| failure::config(format!("{}: {e}", path.display())))?;
        let s = v
            .get("step")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| failure::config(format!("{}: line without a step", path.display())))?;
        if s < step {
            keep.push(line);
        }
    }
    Ok(keep)
}

/// A fresh run must not leave checkpoints or snapshots of an earlier run beside its own.
fn clear_stale(dir: &Path) -> anyhow::Result<()> {
    let ckpts = dir.join(CHECKPOINTS);
    if ckpts.exists() {
        std::fs::remove_dir_all(&ckpts).with_context(|| format!("removing {}", ckpts.display()))?;
    }
    let envs = dir.join(ENVS);
    if envs.exists() {
        std::fs::remove_file(&envs).with_context(|| format!("removing {}", envs.display()))?;
    }
    Ok(())
}

pub fn run(cfg: &ExperimentConfig, jobs: usize) -> anyhow::Result<()> {
    let (spec, triples) = load_training_data(cfg)?;
    let seeds = cfg.sweep_seeds();
    io::for_each(&seeds, jobs, |&seed| {
        let tcfg = cfg.train_for(seed);
        let dir = run_dir(cfg, seed);
        io::create_dir(&dir)?;
        clear_stale(&dir)?;
        let trainer = Trainer::new(&triples, &spec, &tcfg).with_context(|| format!("seed {seed}"))?;
        drive(trainer, &dir, Vec::new(), Vec::new()).with_context(|| format!("seed {seed}"))
    })?;
    Ok(())
}

/// Continue the run that wrote `ckpt_path`. Its settings must match the experiment config.
pub fn resume(cfg: &ExperimentConfig, ckpt_path: &Path) -> anyhow::Result<()> {
    let ckpt: Checkpoint = io::read_json(ckpt_path)?;
    let seed = ckpt.config.seed;
    if !cfg.sweep_seeds().contains(&seed) {
        return Err(failure::config(format!("checkpoint seed {seed} is not in the configured sweep")));
    }
    if ckpt.config != cfg.train_for(seed) {
        return Err(failure::config("checkpoint training settings differ from the experiment config"));
    }
    let (spec, triples) = load_training_data(cfg)?;
    let dir = run_dir(cfg, seed);
    let prior_records = lines_before(&dir.join(RECORDS), ckpt.step)?;
    if prior_records.len() as u64 != ckpt.step {
        return Err(failure::config(format!(
            "{} holds {} records before step {}; cannot continue contiguously",
            dir.join(RECORDS).display(),
            prior_records.len(),
            ckpt.step
        )));
    }
    let prior_envs = if ckpt.config.dump_envs {
        lines_before(&dir.join(ENVS), ckpt.step)?
    } else {
        Vec::new()
    };
    let trainer = Trainer::resume(&triples, &spec, &ckpt)?;
    drive(trainer, &dir, prior_records, prior_envs)
}
