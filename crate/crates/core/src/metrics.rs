//! Dice similarity coefficient.

use ndarray::{ArrayView, Axis, Dimension, Zip};

use crate::error::{Error, Result};
use crate::volume_io::MaskVolume;

/// `2|A ∩ B| / (|A| + |B|)` over binary label arrays; both empty gives 1.
pub fn dsc_arrays<D: Dimension>(pred: &ArrayView<u8, D>, gt: &ArrayView<u8, D>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "dsc inputs differ: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    Zip::from(pred).and(gt).for_each(|&p, &g| {
        let (p, g) = (p != 0, g != 0);
        inter += usize::from(p && g);
        a += usize::from(p);
        b += usize::from(g);
    });
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Volume DSC between two masks of identical dims.
pub fn dsc(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    dsc_arrays(&pred.labels.view(), &gt.labels.view())
}

/// Mean of per-slice 2D DSCs (alternative aggregation).
pub fn dsc_slice_mean(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("dsc inputs differ: {:?} vs {:?}", pred.dims(), gt.dims())));
    }
    let depth = pred.dims().0;
    let mut total = 0.0;
    for k in 0..depth {
        total += dsc_arrays(
            &pred.labels.index_axis(Axis(0), k),
            &gt.labels.index_axis(Axis(0), k),
        )?;
    }
    Ok(total / depth as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::DatasetId;
    use ndarray::{Array2, Array3};

    fn mask(labels: Array3<u8>) -> MaskVolume {
        MaskVolume::new(labels, [1.0; 3], "c", DatasetId::Promise12).unwrap()
    }

    #[test]
    fn identical_overlap_and_empty() {
        let mut a = Array3::zeros((1, 4, 4));
        a[[0, 1, 1]] = 1;
        assert_eq!(dsc(&mask(a.clone()), &mask(a)).unwrap(), 1.0);
        let e = mask(Array3::zeros((2, 2, 2)));
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn half_overlapping_squares() {
        let mut a = Array2::<u8>::zeros((4, 4));
        let mut b = Array2::<u8>::zeros((4, 4));
        a.slice_mut(ndarray::s![0..2, 0..2]).fill(1);
        b.slice_mut(ndarray::s![0..2, 1..3]).fill(1);
        assert_eq!(dsc_arrays(&a.view(), &b.view()).unwrap(), 0.5);
    }

    #[test]
    fn dims_must_match() {
        let a = mask(Array3::zeros((1, 2, 2)));
        let b = mask(Array3::zeros((1, 2, 3)));
        assert!(dsc(&a, &b).is_err());
        assert!(dsc_slice_mean(&a, &b).is_err());
    }
}
