//! Run-root layout and data loading shared by the protocol steps.
//!
//! ```text
//! <root>/manifests/<dataset>.json
//! <root>/splits/<dataset>.json
//! <root>/runs/<source>/{config.cfg, checkpoint.bin, train_log.csv}
//! <root>/matrix.csv, matrix.txt, matrix_cases.csv
//! <root>/cache/
//! ```

use std::path::{Path, PathBuf};

use super::split::SplitSpec;
use super::Source;
use crate::error::{Error, Result};
use crate::preprocess::{cached_volume_to_samples, PreprocessParams, SampleCache, SliceSample};
use crate::volume_io::{load_case, DatasetId, DatasetManifest, MaskVolume};

#[derive(Debug, Clone)]
pub struct RunRoot {
    root: PathBuf,
    /// Use the on-disk sample cache under `<root>/cache`.
    pub use_cache: bool,
}

impl RunRoot {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunRoot {
            root: root.into(),
            use_cache: true,
        }
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self, d: DatasetId) -> PathBuf {
        self.root.join("manifests").join(format!("{d}.json"))
    }

    pub fn split_path(&self, d: DatasetId) -> PathBuf {
        self.root.join("splits").join(format!("{d}.json"))
    }

    pub fn run_dir(&self, s: Source) -> PathBuf {
        self.root.join("runs").join(s.as_str())
    }

    pub fn checkpoint_path(&self, s: Source) -> PathBuf {
        self.run_dir(s).join("checkpoint.bin")
    }

    pub fn config_path(&self, s: Source) -> PathBuf {
        self.run_dir(s).join("config.cfg")
    }

    pub fn log_path(&self, s: Source) -> PathBuf {
        self.run_dir(s).join("train_log.csv")
    }

    pub fn matrix_csv(&self) -> PathBuf {
        self.root.join("matrix.csv")
    }

    pub fn matrix_txt(&self) -> PathBuf {
        self.root.join("matrix.txt")
    }

    pub fn matrix_cases_csv(&self) -> PathBuf {
        self.root.join("matrix_cases.csv")
    }

    pub fn cache(&self) -> Option<SampleCache> {
        self.use_cache.then(|| SampleCache::new(self.root.join("cache")))
    }

    pub fn load_manifest(&self, d: DatasetId) -> Result<DatasetManifest> {
        let p = self.manifest_path(d);
        if !p.is_file() {
            return Err(Error::Missing(format!(
                "manifest for {d} ({}); run `ingest` first",
                p.display()
            )));
        }
        DatasetManifest::load(&p)
    }

    pub fn load_split(&self, d: DatasetId) -> Result<SplitSpec> {
        let p = self.split_path(d);
        if !p.is_file() {
            return Err(Error::Missing(format!("split for {d} ({}); run `split` first", p.display())));
        }
        SplitSpec::load(&p)
    }

    /// Datasets that have both a manifest and a split, in table order.
    pub fn available_datasets(&self) -> Vec<DatasetId> {
        DatasetId::TABLE_ORDER
            .into_iter()
            .filter(|d| self.manifest_path(*d).is_file() && self.split_path(*d).is_file())
            .collect()
    }
}

/// One case's preprocessed slices plus its native-resolution mask.
#[derive(Debug, Clone)]
pub struct CaseData {
    pub case_id: String,
    pub dataset: DatasetId,
    pub samples: Vec<SliceSample>,
    pub native_mask: MaskVolume,
}

/// Loads and preprocesses the listed cases of a manifest, in list order.
pub fn load_cases(
    manifest: &DatasetManifest,
    case_ids: &[String],
    params: &PreprocessParams,
    cache: Option<&SampleCache>,
) -> Result<Vec<CaseData>> {
    case_ids
        .iter()
        .map(|id| {
            let entry = manifest
                .case(id)
                .ok_or_else(|| Error::Missing(format!("case {id} in the {} manifest", manifest.dataset)))?;
            let (vol, mask) = load_case(entry, manifest.dataset)?;
            let samples = cached_volume_to_samples(&vol, &mask, params, cache)?;
            Ok(CaseData {
                case_id: id.clone(),
                dataset: manifest.dataset,
                samples,
                native_mask: mask,
            })
        })
        .collect()
}
