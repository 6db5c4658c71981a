//! The protocol steps as run-root operations: ingest, split, train.

use std::fs;
use std::path::Path;

use log::{info, warn};

use super::run::{load_cases, CaseData, RunRoot};
use super::split::{make_split, SplitSpec};
use super::train::{train_model, write_log, EpochLog, TrainOutcome};
use super::Source;
use crate::config::{Balance, TrainConfig};
use crate::error::{Error, Result};
use crate::preprocess::SliceSample;
use crate::volume_io::{build_manifest, DatasetId, DatasetManifest, ManifestOptions};

/// Scans `data_root`, verifies every case and stores the manifest.
pub fn ingest(root: &RunRoot, dataset: DatasetId, data_root: &Path, opts: &ManifestOptions) -> Result<DatasetManifest> {
    let manifest = build_manifest(data_root, dataset, opts)?;
    for ex in &manifest.excluded {
        warn!("{dataset}: excluded {}: {}", ex.case_id, ex.reason);
    }
    let path = root.manifest_path(dataset);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    manifest.save(&path)?;
    Ok(manifest)
}

/// Makes and stores the seeded split of an ingested dataset.
pub fn split(root: &RunRoot, dataset: DatasetId, seed: u64) -> Result<SplitSpec> {
    let manifest = root.load_manifest(dataset)?;
    let spec = make_split(&manifest, seed)?;
    spec.save(&root.split_path(dataset))?;
    Ok(spec)
}

/// Datasets whose training splits feed `source`.
pub fn source_datasets(root: &RunRoot, source: Source) -> Result<Vec<DatasetId>> {
    match source {
        Source::Dataset(d) => Ok(vec![d]),
        Source::Combined => {
            let ds = root.available_datasets();
            if ds.is_empty() {
                return Err(Error::Missing("ingested and split datasets for the combined model".into()));
            }
            if ds.len() < DatasetId::ALL.len() {
                warn!("combined model uses only {} of {} datasets", ds.len(), DatasetId::ALL.len());
            }
            Ok(ds)
        }
    }
}

/// Repeats each dataset's samples cyclically up to the largest dataset's
/// count.
fn balance_datasets(parts: Vec<Vec<SliceSample>>) -> Vec<SliceSample> {
    let target = parts.iter().map(Vec::len).max().unwrap_or(0);
    parts
        .into_iter()
        .filter(|p| !p.is_empty())
        .flat_map(|p| p.iter().cycle().take(target).cloned().collect::<Vec<_>>())
        .collect()
}

/// Trains the model for `source` and writes config, checkpoint and log into
/// its run directory.
pub fn train_source(
    root: &RunRoot,
    source: Source,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let datasets = source_datasets(root, source)?;
    let cache = root.cache();
    let mut val_params = cfg.preprocess;
    val_params.skip_empty_slices = false;

    let mut train_parts = Vec::new();
    let mut val = Vec::new();
    for d in &datasets {
        let manifest = root.load_manifest(*d)?;
        let split = root.load_split(*d)?;
        split.check_partition(&manifest)?;
        let train_cases = load_cases(&manifest, &split.train_cases, &cfg.preprocess, cache.as_ref())?;
        let val_cases = load_cases(&manifest, &split.val_cases, &val_params, cache.as_ref())?;
        info!(
            "{source}: {d} contributes {} training and {} validation cases",
            train_cases.len(),
            val_cases.len()
        );
        train_parts.push(train_cases.into_iter().flat_map(|c: CaseData| c.samples).collect::<Vec<_>>());
        val.extend(val_cases.into_iter().map(|c| c.samples));
    }
    let train: Vec<SliceSample> = match (source, cfg.balance) {
        (Source::Combined, Balance::Datasets) => balance_datasets(train_parts),
        _ => train_parts.into_iter().flatten().collect(),
    };
    info!("{source}: {} training slices", train.len());

    let outcome = train_model(&train, &val, cfg, source.as_str(), progress)?;

    let dir = root.run_dir(source);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    cfg.save(&root.config_path(source))?;
    outcome.checkpoint.save(&root.checkpoint_path(source))?;
    write_log(&root.log_path(source), &outcome.log)?;
    Ok(outcome)
}
