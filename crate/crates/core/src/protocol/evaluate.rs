//! Per-case native-resolution DSC of a model on a test split.

use serde::{Deserialize, Serialize};

use super::run::CaseData;
use crate::config::DscMode;
use crate::error::{Error, Result};
use crate::metrics::{dsc, dsc_slice_mean};
use crate::unet::{predict_mask, UNet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub case_id: String,
    pub dsc: f64,
}

/// Predicts every case and scores it against its native mask. The samples
/// of each case must be complete (no skipped slices).
pub fn evaluate_model(model: &UNet, cases: &[CaseData], mode: DscMode, batch_size: usize) -> Result<Vec<CaseScore>> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("empty test split".into()));
    }
    cases
        .iter()
        .map(|case| {
            let pred = predict_mask(model, &case.samples, case.native_mask.spacing, batch_size)?;
            let score = match mode {
                DscMode::Volume => dsc(&pred, &case.native_mask)?,
                DscMode::Slice => dsc_slice_mean(&pred, &case.native_mask)?,
            };
            Ok(CaseScore {
                case_id: case.case_id.clone(),
                dsc: score,
            })
        })
        .collect()
}

pub fn mean_dsc(scores: &[CaseScore]) -> f64 {
    if scores.is_empty() {
        return f64::NAN;
    }
    scores.iter().map(|s| s.dsc).sum::<f64>() / scores.len() as f64
}
