//! Contour overlays: the grayscale slice with the predicted outline in green
//! and the ground-truth outline in red. Pixels on both outlines are yellow.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::metrics::dsc_arrays;
use crate::volume_io::{DatasetId, MaskVolume, Volume};

pub const GREEN: Rgb<u8> = Rgb([0, 255, 0]);
pub const RED: Rgb<u8> = Rgb([255, 0, 0]);
pub const YELLOW: Rgb<u8> = Rgb([255, 255, 0]);

/// Boundary of a binary mask: foreground pixels with at least one
/// 4-neighbour in the background (the frame counts as background).
pub fn contour(mask: &ArrayView2<u8>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let fg = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[[y as usize, x as usize]] != 0
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y as isize, x as isize);
        fg(y, x) && !(fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1))
    })
}

/// Renders one slice. The image is min-max scaled to 8-bit gray.
pub fn render_overlay(image: &ArrayView2<f32>, pred: &ArrayView2<u8>, gt: &ArrayView2<u8>) -> Result<RgbImage> {
    let (h, w) = image.dim();
    if pred.dim() != (h, w) || gt.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "overlay inputs differ: image {:?}, prediction {:?}, truth {:?}",
            image.dim(),
            pred.dim(),
            gt.dim()
        )));
    }
    let lo = image.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = image.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let pc = contour(pred);
    let gc = contour(gt);
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = match (pc[[y, x]], gc[[y, x]]) {
                (true, true) => YELLOW,
                (true, false) => GREEN,
                (false, true) => RED,
                (false, false) => {
                    let g = ((image[[y, x]] - lo) * scale).round().clamp(0.0, 255.0) as u8;
                    Rgb([g, g, g])
                }
            };
            out.put_pixel(x as u32, y as u32, px);
        }
    }
    Ok(out)
}

/// `<dataset>_<case>_slice<NNN>_dsc<D.DD>.png`
pub fn overlay_filename(dataset: DatasetId, case_id: &str, slice: usize, dsc: f64) -> String {
    format!("{dataset}_{case_id}_slice{slice:03}_dsc{dsc:.2}.png")
}

/// Writes one overlay per slice into `out_dir`; the DSC in each file name
/// is the slice's 2D score.
pub fn write_case_overlays(out_dir: &Path, image: &Volume, pred: &MaskVolume, gt: &MaskVolume) -> Result<Vec<PathBuf>> {
    if image.dims() != pred.dims() || image.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "overlay volumes differ: image {:?}, prediction {:?}, truth {:?}",
            image.dims(),
            pred.dims(),
            gt.dims()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for k in 0..image.dims().0 {
        let img = image.voxels.index_axis(Axis(0), k);
        let p = pred.labels.index_axis(Axis(0), k);
        let g = gt.labels.index_axis(Axis(0), k);
        let score = dsc_arrays(&p, &g)?;
        let path = out_dir.join(overlay_filename(gt.dataset, &gt.case_id, k, score));
        render_overlay(&img, &p, &g)?.save(&path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;

    #[test]
    fn contour_of_square_is_its_ring() {
        let mut m = Array2::<u8>::zeros((6, 6));
        m.slice_mut(s![1..5, 1..5]).fill(1);
        let c = contour(&m.view());
        assert_eq!(c.iter().filter(|&&b| b).count(), 12);
        assert!(!c[[2, 2]] && c[[1, 1]] && !c[[0, 0]]);
    }

    #[test]
    fn mask_touching_frame_keeps_edge() {
        let m = Array2::<u8>::ones((3, 3));
        let c = contour(&m.view());
        assert_eq!(c.iter().filter(|&&b| b).count(), 8);
    }

    #[test]
    fn filename_rounds_dsc() {
        assert_eq!(
            overlay_filename(DatasetId::Promise12, "Case03", 4, 0.5),
            "promise12_Case03_slice004_dsc0.50.png"
        );
    }
}
