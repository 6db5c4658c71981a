//! Seeded case-level train/validation/test partitions.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::sample_seed;
use crate::error::{Error, Result};
use crate::volume_io::{DatasetId, DatasetManifest};

pub const MIN_CASES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub dataset: DatasetId,
    pub seed: u64,
    pub train_cases: Vec<String>,
    pub val_cases: Vec<String>,
    pub test_cases: Vec<String>,
}

/// Partition sizes `(train, val, test)` for `n` cases: the test share is
/// `floor(0.2 n)`, validation `floor(0.2 (n - test))`, the rest trains.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = n / 5;
    let val = (n - test) / 5;
    (n - test - val, val, test)
}

/// Shuffles the manifest's case IDs with a generator seeded by
/// `(seed, dataset)` and cuts them into test, validation and training parts.
pub fn make_split(manifest: &DatasetManifest, seed: u64) -> Result<SplitSpec> {
    let n = manifest.cases.len();
    if n < MIN_CASES {
        return Err(Error::TooFewCases {
            dataset: manifest.dataset.to_string(),
            found: n,
            required: MIN_CASES,
        });
    }
    let mut ids: Vec<String> = manifest.cases.iter().map(|c| c.case_id.clone()).collect();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, manifest.dataset.index() as u64, 0));
    ids.shuffle(&mut rng);
    let (_, val, test) = split_sizes(n);
    let mut test_cases = ids[..test].to_vec();
    let mut val_cases = ids[test..test + val].to_vec();
    let mut train_cases = ids[test + val..].to_vec();
    test_cases.sort();
    val_cases.sort();
    train_cases.sort();
    let spec = SplitSpec {
        dataset: manifest.dataset,
        seed,
        train_cases,
        val_cases,
        test_cases,
    };
    spec.check_partition(manifest)?;
    Ok(spec)
}

impl SplitSpec {
    /// Pairwise disjoint parts.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.train_cases.iter().chain(&self.val_cases).chain(&self.test_cases) {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "split leak: case {id} of {} appears in more than one partition",
                    self.dataset
                )));
            }
        }
        Ok(())
    }

    /// Disjoint parts whose union is exactly the manifest's case list.
    pub fn check_partition(&self, manifest: &DatasetManifest) -> Result<()> {
        self.check_disjoint()?;
        let all: HashSet<&str> = manifest.cases.iter().map(|c| c.case_id.as_str()).collect();
        let parts: HashSet<&str> = self
            .train_cases
            .iter()
            .chain(&self.val_cases)
            .chain(&self.test_cases)
            .map(String::as_str)
            .collect();
        if all != parts {
            return Err(Error::InvalidArgument(format!(
                "split for {} does not partition its manifest",
                self.dataset
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SplitSpec = serde_json::from_str(&text)?;
        spec.check_disjoint()?;
        Ok(spec)
    }
}
