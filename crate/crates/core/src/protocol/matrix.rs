//! The cross-dataset evaluation matrix and its CSV / text reports.
//!
//! Layout: testing datasets as rows, single-dataset training sources as
//! columns. The combined model gets one extra row whose columns are the
//! testing datasets.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;

use super::evaluate::{evaluate_model, mean_dsc, CaseScore};
use super::run::{load_cases, CaseData, RunRoot};
use super::Source;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::unet::Checkpoint;
use crate::volume_io::DatasetId;

pub const COMBINED_LABEL: &str = "combined (trained on all; columns = testing dataset)";

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub source: Source,
    pub test: DatasetId,
    pub mean_dsc: f64,
    pub cases: Vec<CaseScore>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalMatrix {
    /// Testing datasets, in table order.
    pub datasets: Vec<DatasetId>,
    /// Requested training sources (the datasets, then combined).
    pub sources: Vec<Source>,
    pub cells: Vec<CellResult>,
    pub warnings: Vec<String>,
}

impl EvalMatrix {
    pub fn get(&self, source: Source, test: DatasetId) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.source == source && c.test == test)
    }

    pub fn mean(&self, source: Source, test: DatasetId) -> Option<f64> {
        self.get(source, test).map(|c| c.mean_dsc)
    }

    /// Requested cells with no result.
    pub fn holes(&self) -> Vec<(Source, DatasetId)> {
        self.sources
            .iter()
            .flat_map(|s| self.datasets.iter().map(move |d| (*s, *d)))
            .filter(|(s, d)| self.get(*s, *d).is_none())
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.holes().is_empty()
    }

    /// Diagonal cells (source dataset == testing dataset).
    pub fn diagonal(&self) -> Vec<f64> {
        self.datasets
            .iter()
            .filter_map(|d| self.mean(Source::Dataset(*d), *d))
            .collect()
    }

    /// Single-dataset cells with source != testing dataset.
    pub fn off_diagonal(&self) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| matches!(c.source, Source::Dataset(d) if d != c.test))
            .map(|c| c.mean_dsc)
            .collect()
    }

    pub fn combined_row(&self) -> Vec<Option<f64>> {
        self.datasets.iter().map(|d| self.mean(Source::Combined, *d)).collect()
    }

    fn column_sources(&self) -> Vec<DatasetId> {
        self.sources
            .iter()
            .filter_map(|s| match s {
                Source::Dataset(d) => Some(*d),
                Source::Combined => None,
            })
            .collect()
    }

    fn fmt_cell(v: Option<f64>) -> String {
        v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "NA".into())
    }

    /// Rows of the table, first row is the header.
    fn table(&self) -> Vec<Vec<String>> {
        let cols = self.column_sources();
        let mut rows = Vec::new();
        let mut header = vec!["testing \\ training".to_string()];
        header.extend(cols.iter().map(|d| d.to_string()));
        rows.push(header);
        for t in &self.datasets {
            let mut row = vec![t.to_string()];
            row.extend(cols.iter().map(|s| Self::fmt_cell(self.mean(Source::Dataset(*s), *t))));
            rows.push(row);
        }
        if self.sources.contains(&Source::Combined) {
            let mut row = vec![COMBINED_LABEL.to_string()];
            row.extend(cols.iter().map(|t| {
                if self.datasets.contains(t) {
                    Self::fmt_cell(self.mean(Source::Combined, *t))
                } else {
                    "NA".into()
                }
            }));
            rows.push(row);
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.table() {
            let quoted: Vec<String> = row
                .iter()
                .map(|c| if c.contains(',') { format!("\"{c}\"") } else { c.clone() })
                .collect();
            out.push_str(&quoted.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let rows = self.table();
        let ncols = rows.iter().map(Vec::len).max().unwrap_or(0);
        let widths: Vec<usize> = (0..ncols)
            .map(|i| rows.iter().filter_map(|r| r.get(i)).map(|c| c.chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::from("Mean test DSC (rows: testing dataset, columns: training source)\n\n");
        for (k, row) in rows.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    if i == 0 {
                        format!("{c:<w$}", w = widths[i])
                    } else {
                        format!("{c:>w$}", w = widths[i])
                    }
                })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if k == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * ncols.saturating_sub(1)));
                out.push('\n');
            }
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }

    pub fn cases_csv(&self) -> String {
        let mut out = String::from("training_source,testing_dataset,case_id,dsc\n");
        for c in &self.cells {
            for s in &c.cases {
                let _ = writeln!(out, "{},{},{},{:.6}", c.source, c.test, s.case_id, s.dsc);
            }
        }
        out
    }

    pub fn write(&self, root: &RunRoot) -> Result<()> {
        for (path, text) in [
            (root.matrix_csv(), self.to_csv()),
            (root.matrix_txt(), self.to_text()),
            (root.matrix_cases_csv(), self.cases_csv()),
        ] {
            write_text(&path, &text)?;
        }
        Ok(())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The run's config for `source`, if its directory has one.
fn source_config(root: &RunRoot, source: Source) -> Result<TrainConfig> {
    let p = root.config_path(source);
    if !p.is_file() {
        return Err(Error::Missing(format!("config for {source} ({})", p.display())));
    }
    TrainConfig::load(&p)
}

/// Evaluates every available checkpoint on every available test split.
/// Missing checkpoints leave holes and add a warning.
pub fn build_matrix(root: &RunRoot) -> Result<EvalMatrix> {
    let datasets = root.available_datasets();
    if datasets.is_empty() {
        return Err(Error::Missing(format!(
            "manifests and splits under {}; run `ingest` and `split` first",
            root.path().display()
        )));
    }
    let mut m = EvalMatrix {
        sources: datasets.iter().map(|d| Source::Dataset(*d)).chain([Source::Combined]).collect(),
        datasets: datasets.clone(),
        ..Default::default()
    };

    let mut tests = HashMap::new();
    for d in &datasets {
        let split = root.load_split(*d)?;
        split.check_disjoint()?;
        if split.test_cases.is_empty() {
            return Err(Error::InvalidArgument(format!("empty test split for {d}")));
        }
        tests.insert(*d, (root.load_manifest(*d)?, split.test_cases));
    }
    // Test data preprocessed per distinct parameter set.
    let mut loaded: HashMap<(String, DatasetId), Vec<CaseData>> = HashMap::new();
    let cache = root.cache();

    for source in m.sources.clone() {
        let ckpt_path = root.checkpoint_path(source);
        if !ckpt_path.is_file() {
            let msg = format!("no checkpoint for {source} ({}); its cells are NA", ckpt_path.display());
            warn!("{msg}");
            m.warnings.push(msg);
            continue;
        }
        let cfg = match source_config(root, source) {
            Ok(c) => c,
            Err(e) => {
                let msg = format!("{source}: {e}; its cells are NA");
                warn!("{msg}");
                m.warnings.push(msg);
                continue;
            }
        };
        let model = Checkpoint::load(&ckpt_path)?.model()?;
        let mut params = cfg.preprocess;
        params.skip_empty_slices = false;
        let key = serde_json::to_string(&params)?;
        for d in &datasets {
            let slot = (key.clone(), *d);
            if !loaded.contains_key(&slot) {
                let (manifest, ids) = &tests[d];
                loaded.insert(slot.clone(), load_cases(manifest, ids, &params, cache.as_ref())?);
            }
            let scores = evaluate_model(&model, &loaded[&slot], cfg.dsc_mode, cfg.eval_batch_size)?;
            m.cells.push(CellResult {
                source,
                test: *d,
                mean_dsc: mean_dsc(&scores),
                cases: scores,
            });
        }
    }
    Ok(m)
}
