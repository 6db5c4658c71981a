//! Slice-wise inference restacked into a native-resolution mask volume.

use ndarray::{Array2, Array3, Array4, Axis};

use super::model::UNet;
use crate::error::{Error, Result};
use crate::preprocess::{normalize, resize_nearest, SliceSample};
use crate::volume_io::{MaskVolume, Spacing};

/// Standardises each sample and stacks them into a `B x 1 x H x W` batch.
pub fn batch_images(samples: &[&SliceSample]) -> Result<Array4<f32>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (h, w) = first.image.dim();
    let mut batch = Array4::<f32>::zeros((samples.len(), 1, h, w));
    for (i, s) in samples.iter().enumerate() {
        if s.image.dim() != (h, w) {
            return Err(Error::Shape("batch samples differ in size".into()));
        }
        batch
            .index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(0), 0)
            .assign(&normalize(&s.image.view()));
    }
    Ok(batch)
}

/// Per-pixel argmax over the class axis of one sample's logits.
pub fn argmax_mask(logits: &Array4<f32>, index: usize) -> Array2<u8> {
    let sample = logits.index_axis(Axis(0), index);
    let (_, h, w) = sample.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0usize;
        for c in 1..sample.dim().0 {
            if sample[[c, y, x]] > sample[[best, y, x]] {
                best = c;
            }
        }
        u8::from(best == 1)
    })
}

/// Checks that `samples` are the complete, ordered slices of one case.
fn check_order(samples: &[SliceSample]) -> Result<&SliceSample> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Missing("slices: no samples for the case".into()))?;
    for (k, s) in samples.iter().enumerate() {
        if s.provenance.slice_index != k {
            return Err(Error::Missing(format!(
                "slices: case {} expected slice {k}, found slice {} (samples must be complete and ordered)",
                s.provenance.case_id, s.provenance.slice_index
            )));
        }
        if s.provenance.case_id != first.provenance.case_id || s.native_dims != first.native_dims {
            return Err(Error::InvalidArgument("samples from more than one case".into()));
        }
    }
    Ok(first)
}

/// Restacks per-slice masks (ordered by slice index, at training resolution)
/// into a mask volume at the slices' native dims.
pub fn restack(samples: &[SliceSample], slice_masks: &[Array2<u8>], spacing: Spacing) -> Result<MaskVolume> {
    let first = check_order(samples)?;
    if slice_masks.len() != samples.len() {
        return Err(Error::Shape("one predicted mask per sample required".into()));
    }
    let (h, w) = first.native_dims;
    let mut labels = Array3::<u8>::zeros((samples.len(), h, w));
    for (k, m) in slice_masks.iter().enumerate() {
        labels.index_axis_mut(Axis(0), k).assign(&resize_nearest(&m.view(), (h, w)));
    }
    MaskVolume::new(labels, spacing, first.provenance.case_id.clone(), first.provenance.dataset)
}

/// Predicts a case from its complete, ordered samples.
pub fn predict_mask(model: &UNet, samples: &[SliceSample], spacing: Spacing, batch_size: usize) -> Result<MaskVolume> {
    check_order(samples)?;
    let mut masks = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SliceSample> = chunk.iter().collect();
        let logits = model.forward(&batch_images(&refs)?)?;
        for i in 0..chunk.len() {
            masks.push(argmax_mask(&logits, i));
        }
    }
    restack(samples, &masks, spacing)
}
