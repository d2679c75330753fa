//! `simulate`: generate an interaction log, split it, and write every partition as interaction
//! CSV plus preference-triple JSONL, with the feature spec and a split manifest.

use std::path::Path;

use causaldpo::causal::{random_feature_map, scm_sample, FeatureMap, ScmSample};
use causaldpo::evalrec::{split_with_exposure, Interaction, InteractionLog, Shift, SplitManifest, SplitResult};
use causaldpo::linalg::Matrix;
use causaldpo::model::FeatureSpec;
use causaldpo::preference::{write_triples, PreferenceTriple};
use causaldpo::recsim::RecSim;
use causaldpo::rng;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::config::{ExperimentConfig, Source, PARTITIONS};
use crate::io;

/// Offset added to the root seed when drawing each partition's dispreferred actions.
const NEGATIVE_SEED_OFFSETS: [u64; 4] = [0, 3000, 2000, 1000];

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    source: Source,
    seed: u64,
    log_records: usize,
    exposure_records: Option<usize>,
    split: SplitManifest,
    files: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scm_features: Option<&'a FeatureMap>,
}

pub struct Dataset {
    pub spec: FeatureSpec,
    pub split: SplitResult,
    pub triples: [Vec<PreferenceTriple>; 4],
    log_records: usize,
    exposure_records: Option<usize>,
    scm_features: Option<FeatureMap>,
}

fn partitions(s: &SplitResult) -> [&InteractionLog; 4] {
    [&s.train, &s.valid, &s.iid_test, &s.ood_test]
}

fn recsim_dataset(cfg: &ExperimentConfig) -> anyhow::Result<Dataset> {
    let sim = RecSim::generate(&cfg.data.recsim)?;
    let exposure = match cfg.split.shift {
        Shift::Exposure => Some(sim.exposure_table(cfg.data.exposure_per_user, cfg.seed)?),
        _ => None,
    };
    let split = split_with_exposure(&sim.log, exposure.as_ref(), &cfg.split, cfg.seed)?;
    let mut triples: [Vec<PreferenceTriple>; 4] = Default::default();
    for (i, part) in partitions(&split).into_iter().enumerate() {
        triples[i] = sim.triples(part, cfg.seed + NEGATIVE_SEED_OFFSETS[i])?;
    }
    Ok(Dataset {
        spec: sim.spec.clone(),
        log_records: sim.log.len(),
        exposure_records: exposure.map(|e| e.len()),
        split,
        triples,
        scm_features: None,
    })
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut rng::Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// One record per sample: user `x`, item `y`, and the sample index as timestamp, which is how
/// the environment of a record is recovered when its context is built.
fn scm_triples(log: &InteractionLog, samples: &[ScmSample], features: &FeatureMap, n_y: usize, seed: u64) -> Vec<PreferenceTriple> {
    let mut rng = rng::substream(seed, "negatives");
    log.records
        .iter()
        .map(|r| {
            let s = &samples[r.timestamp as usize];
            let y_w = s.y;
            let mut y_l = rng.random_range(0..n_y - 1);
            if y_l >= y_w {
                y_l += 1;
            }
            PreferenceTriple {
                x: features.context(s.e, s.x),
                y_w,
                y_l,
                env_label: Some(s.e),
            }
        })
        .collect()
}

fn scm_dataset(cfg: &ExperimentConfig) -> anyhow::Result<Dataset> {
    let scm = cfg.scm()?;
    if scm.n_y() < 2 {
        return Err(crate::failure::config("the SCM needs at least two values of Y to form preference pairs"));
    }
    if cfg.split.shift == Shift::Exposure {
        return Err(crate::failure::config("the exposure shift needs the recsim source"));
    }
    let samples = scm_sample(&scm, cfg.data.n_samples, None, cfg.seed)?;
    let log = InteractionLog::new(
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| Interaction::new(s.x as u64, s.y as u64, i as i64, 1.0))
            .collect(),
    );
    let mut frng = rng::substream(cfg.seed, "features");
    let features = random_feature_map(&scm, 1, scm.n_x(), &mut frng);
    let spec = FeatureSpec::new(gaussian_matrix(scm.n_y(), 1, &mut frng), gaussian_matrix(scm.n_y(), scm.n_x(), &mut frng))?;
    let split = split_with_exposure(&log, None, &cfg.split, cfg.seed)?;
    let mut triples: [Vec<PreferenceTriple>; 4] = Default::default();
    for (i, part) in partitions(&split).into_iter().enumerate() {
        triples[i] = scm_triples(part, &samples, &features, scm.n_y(), cfg.seed + NEGATIVE_SEED_OFFSETS[i]);
    }
    Ok(Dataset {
        spec,
        log_records: log.len(),
        exposure_records: None,
        split,
        triples,
        scm_features: Some(features),
    })
}

pub fn build(cfg: &ExperimentConfig) -> anyhow::Result<Dataset> {
    match cfg.data.source {
        Source::Recsim => recsim_dataset(cfg),
        Source::Scm => scm_dataset(cfg),
    }
}

pub fn write(cfg: &ExperimentConfig, ds: &Dataset, dir: &Path) -> anyhow::Result<()> {
    io::create_dir(dir)?;
    let mut files = Vec::new();
    for (i, (name, part)) in PARTITIONS.iter().zip(partitions(&ds.split)).enumerate() {
        let csv_name = format!("{name}.csv");
        part.write_csv(io::create(&dir.join(&csv_name))?)?;
        let jsonl_name = format!("{name}.jsonl");
        write_triples(io::create(&dir.join(&jsonl_name))?, &ds.triples[i])?;
        files.extend([csv_name, jsonl_name]);
    }
    io::write_json(&dir.join("feature_spec.json"), &ds.spec)?;
    files.push("feature_spec.json".into());
    let manifest = Manifest {
        source: cfg.data.source,
        seed: cfg.seed,
        log_records: ds.log_records,
        exposure_records: ds.exposure_records,
        split: ds.split.manifest(&cfg.split, cfg.seed),
        files,
        scm_features: ds.scm_features.as_ref(),
    };
    io::write_json(&dir.join("split_manifest.json"), &manifest)
}

pub fn run(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let ds = build(cfg)?;
    write(cfg, &ds, &cfg.data_dir())
}
