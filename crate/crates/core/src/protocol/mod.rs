//! The experiment protocol: seeded case-level splits, the five training
//! runs (four single-dataset, one combined) and the cross-dataset DSC matrix.

pub mod evaluate;
pub mod matrix;
pub mod pipeline;
pub mod run;
pub mod split;
pub mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::DatasetId;

pub use evaluate::{evaluate_model, CaseScore};
pub use matrix::{build_matrix, CellResult, EvalMatrix};
pub use pipeline::{ingest, split, train_source};
pub use run::RunRoot;
pub use split::{make_split, SplitSpec};
pub use train::{train_model, EpochLog, TrainOutcome};

/// Where a model's training data came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Dataset(DatasetId),
    /// Union of the four training splits.
    Combined,
}

impl Source {
    /// Table order: the four datasets, then the combined model.
    pub fn all() -> Vec<Source> {
        DatasetId::TABLE_ORDER
            .iter()
            .map(|d| Source::Dataset(*d))
            .chain([Source::Combined])
            .collect()
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Source::Dataset(d) => d.as_str(),
            Source::Combined => "combined",
        }
    }

    fn order_key(&self) -> usize {
        match self {
            Source::Dataset(d) => DatasetId::TABLE_ORDER.iter().position(|x| x == d).unwrap_or(0),
            Source::Combined => DatasetId::TABLE_ORDER.len(),
        }
    }
}

impl PartialOrd for Source {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Source {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.order_key().cmp(&other.order_key())
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("combined") || s.eq_ignore_ascii_case("all") {
            return Ok(Source::Combined);
        }
        s.parse::<DatasetId>().map(Source::Dataset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sources_order_and_parse() {
        let all = Source::all();
        assert_eq!(all.len(), 5);
        assert_eq!(all[4], Source::Combined);
        let mut sorted = all.clone();
        sorted.reverse();
        sorted.sort();
        assert_eq!(sorted, all);
        for s in all {
            assert_eq!(s.as_str().parse::<Source>().unwrap(), s);
        }
    }
}
