//! Slice extraction, contrast-limited adaptive histogram equalisation,
//! resizing and per-slice standardisation.

use std::fs;
use std::io::{Read, Write};
use std::path::PathBuf;

use byteorder::{ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::volume_io::{DatasetId, MaskVolume, Volume};

pub const HIST_BINS: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset: DatasetId,
    pub case_id: String,
    pub slice_index: usize,
}

/// One preprocessed 2D image/mask pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    pub image: Array2<f32>,
    pub mask: Array2<u8>,
    pub provenance: Provenance,
    /// `(height, width)` of the slice before resizing.
    pub native_dims: (usize, usize),
}

impl SliceSample {
    pub fn new(image: Array2<f32>, mask: Array2<u8>, provenance: Provenance) -> Result<Self> {
        if image.dim() != mask.dim() {
            return Err(Error::Shape(format!(
                "image {:?} and mask {:?} differ",
                image.dim(),
                mask.dim()
            )));
        }
        let native_dims = image.dim();
        Ok(SliceSample {
            image,
            mask,
            provenance,
            native_dims,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessParams {
    pub resolution: usize,
    pub clahe_clip_limit: f64,
    pub clahe_grid: (usize, usize),
    /// Drop slices whose mask is empty (off by default).
    pub skip_empty_slices: bool,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        PreprocessParams {
            resolution: 448,
            clahe_clip_limit: 2.0,
            clahe_grid: (8, 8),
            skip_empty_slices: false,
        }
    }
}

impl PreprocessParams {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(Error::Config("resolution must be >= 1".into()));
        }
        if self.clahe_grid.0 == 0 || self.clahe_grid.1 == 0 {
            return Err(Error::Config("CLAHE grid must be at least 1x1".into()));
        }
        if self.clahe_clip_limit.is_nan() || self.clahe_clip_limit < 0.0 {
            return Err(Error::Config("CLAHE clip limit must be >= 0".into()));
        }
        Ok(())
    }
}

/// Tile boundaries `[floor(i n / k), floor((i+1) n / k))`.
fn tile_bounds(n: usize, k: usize) -> Vec<(usize, usize)> {
    (0..k).map(|i| (i * n / k, (i + 1) * n / k)).collect()
}

/// Contrast-limited adaptive histogram equalisation.
///
/// The image is min-max scaled to `[0, 1]` and binned into 256 levels. Each
/// of the `grid` tiles gets a clipped histogram (limit
/// `clip_limit * tile_area / 256`, excess spread evenly over all bins) whose
/// mid-rank CDF is the tile's mapping; pixels blend the mappings of the four
/// nearest tile centres bilinearly. `clip_limit` of 0 or infinity disables
/// clipping. Output lies in `[0, 1]`; a constant image maps to 0.5.
pub fn adaptive_hist_eq(image: &ArrayView2<f32>, clip_limit: f64, grid: (usize, usize)) -> Result<Array2<f32>> {
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("adaptive_hist_eq input contains non-finite pixels".into()));
    }
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return Ok(image.to_owned());
    }
    let (lo, hi) = image
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi <= lo {
        return Ok(Array2::from_elem((h, w), 0.5));
    }
    let scale = (hi - lo) as f64;
    let bins = image.mapv(|v| {
        let s = (v - lo) as f64 / scale;
        ((s * HIST_BINS as f64) as usize).min(HIST_BINS - 1) as u8
    });

    let ny = grid.0.clamp(1, h);
    let nx = grid.1.clamp(1, w);
    let rows = tile_bounds(h, ny);
    let cols = tile_bounds(w, nx);
    let mut luts = vec![[0f64; HIST_BINS]; ny * nx];
    for (ty, &(r0, r1)) in rows.iter().enumerate() {
        for (tx, &(c0, c1)) in cols.iter().enumerate() {
            let mut hist = [0f64; HIST_BINS];
            for &b in bins.slice(ndarray::s![r0..r1, c0..c1]) {
                hist[b as usize] += 1.0;
            }
            let area = ((r1 - r0) * (c1 - c0)) as f64;
            if clip_limit > 0.0 && clip_limit.is_finite() {
                let limit = (clip_limit * area / HIST_BINS as f64).max(1.0);
                let mut excess = 0.0;
                for v in hist.iter_mut() {
                    if *v > limit {
                        excess += *v - limit;
                        *v = limit;
                    }
                }
                let share = excess / HIST_BINS as f64;
                for v in hist.iter_mut() {
                    *v += share;
                }
            }
            let lut = &mut luts[ty * nx + tx];
            let mut below = 0.0;
            for (b, &count) in hist.iter().enumerate() {
                lut[b] = (below + 0.5 * count) / area;
                below += count;
            }
        }
    }

    // Tile centres in pixel coordinates.
    let centres = |bounds: &[(usize, usize)]| -> Vec<f64> {
        bounds.iter().map(|&(a, b)| (a + b) as f64 / 2.0 - 0.5).collect()
    };
    let cy = centres(&rows);
    let cx = centres(&cols);
    let locate = |c: &[f64], p: f64| -> (usize, usize, f64) {
        if p <= c[0] {
            return (0, 0, 0.0);
        }
        let last = c.len() - 1;
        if p >= c[last] {
            return (last, last, 0.0);
        }
        let i = c.partition_point(|&v| v <= p) - 1;
        (i, i + 1, (p - c[i]) / (c[i + 1] - c[i]))
    };
    let xs: Vec<_> = (0..w).map(|x| locate(&cx, x as f64)).collect();
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        let (y0, y1, wy) = locate(&cy, y as f64);
        for (x, &(x0, x1, wx)) in xs.iter().enumerate() {
            let b = bins[[y, x]] as usize;
            let top = (1.0 - wx) * luts[y0 * nx + x0][b] + wx * luts[y0 * nx + x1][b];
            let bot = (1.0 - wx) * luts[y1 * nx + x0][b] + wx * luts[y1 * nx + x1][b];
            out[[y, x]] = ((1.0 - wy) * top + wy * bot).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}

/// Zero-mean, unit-variance standardisation; constant images become zeros.
pub fn normalize(image: &ArrayView2<f32>) -> Array2<f32> {
    let n = image.len();
    if n == 0 {
        return image.to_owned();
    }
    let mean = image.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = image.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std <= 1e-12 * mean.abs().max(1.0) {
        return Array2::zeros(image.dim());
    }
    image.mapv(|v| ((v as f64 - mean) / std) as f32)
}

/// Source coordinate for output index `i` under half-pixel-centre alignment.
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5
}

pub fn resize_bilinear(image: &ArrayView2<f32>, out: (usize, usize)) -> Array2<f32> {
    let (h, w) = image.dim();
    if (h, w) == out {
        return image.to_owned();
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let s = source_coord(i, n_in, n_out).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(h, out.0);
    let xs = axis(w, out.1);
    Array2::from_shape_fn(out, |(y, x)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = (1.0 - fx) * image[[y0, x0]] as f64 + fx * image[[y0, x1]] as f64;
        let bot = (1.0 - fx) * image[[y1, x0]] as f64 + fx * image[[y1, x1]] as f64;
        ((1.0 - fy) * top + fy * bot) as f32
    })
}

pub fn resize_nearest<T: Copy>(image: &ArrayView2<T>, out: (usize, usize)) -> Array2<T> {
    let (h, w) = image.dim();
    let idx = |n_in: usize, n_out: usize| -> Vec<usize> {
        (0..n_out)
            .map(|i| (((i as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1))
            .collect()
    };
    let ys = idx(h, out.0);
    let xs = idx(w, out.1);
    Array2::from_shape_fn(out, |(y, x)| image[[ys[y], xs[x]]])
}

/// Bilinear for the image, nearest-neighbour for the mask.
pub fn resize(image: &ArrayView2<f32>, mask: &ArrayView2<u8>, out: (usize, usize)) -> Result<(Array2<f32>, Array2<u8>)> {
    if out.0 == 0 || out.1 == 0 {
        return Err(Error::InvalidArgument(format!("resize target must be >= 1, got {out:?}")));
    }
    if image.dim() != mask.dim() {
        return Err(Error::Shape(format!("image {:?} and mask {:?} differ", image.dim(), mask.dim())));
    }
    Ok((resize_bilinear(image, out), resize_nearest(mask, out)))
}

/// One sample per axial slice: CLAHE, then resize to the training
/// resolution. Standardisation is left to batch assembly.
pub fn volume_to_samples(vol: &Volume, mask: &MaskVolume, params: &PreprocessParams) -> Result<Vec<SliceSample>> {
    if vol.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "case {}: volume dims {:?} differ from mask dims {:?}",
            vol.case_id,
            vol.dims(),
            mask.dims()
        )));
    }
    let res = (params.resolution, params.resolution);
    let mut out = Vec::with_capacity(vol.dims().0);
    for (k, (img, m)) in vol
        .voxels
        .axis_iter(Axis(0))
        .zip(mask.labels.axis_iter(Axis(0)))
        .enumerate()
    {
        if params.skip_empty_slices && m.iter().all(|&v| v == 0) {
            continue;
        }
        let eq = adaptive_hist_eq(&img, params.clahe_clip_limit, params.clahe_grid)?;
        let (image, mask) = resize(&eq.view(), &m, res)?;
        out.push(SliceSample {
            image,
            mask,
            provenance: Provenance {
                dataset: vol.dataset,
                case_id: vol.case_id.clone(),
                slice_index: k,
            },
            native_dims: img.dim(),
        });
    }
    Ok(out)
}

/// On-disk cache of preprocessed cases, one gzip file per
/// `(dataset, case, params)` key.
#[derive(Debug, Clone)]
pub struct SampleCache {
    dir: PathBuf,
}

const CACHE_MAGIC: &[u8; 8] = b"PSEGSMP1";

impl SampleCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        SampleCache { dir: dir.into() }
    }

    pub fn key(dataset: DatasetId, case_id: &str, params: &PreprocessParams) -> String {
        let mut h = Sha256::new();
        h.update(dataset.as_str());
        h.update([0]);
        h.update(case_id);
        h.update([0]);
        h.update(serde_json::to_string(params).expect("plain struct"));
        h.finalize().iter().take(12).map(|b| format!("{b:02x}")).collect()
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.bin.gz"))
    }

    pub fn load(&self, key: &str) -> Result<Option<Vec<SliceSample>>> {
        let path = self.path(key);
        if !path.is_file() {
            return Ok(None);
        }
        let mut bytes = Vec::new();
        GzDecoder::new(fs::File::open(&path).map_err(|e| Error::io(&path, e))?)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(&path, e))?;
        decode_samples(&bytes).map(Some)
    }

    pub fn store(&self, key: &str, samples: &[SliceSample]) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.path(key);
        let tmp = path.with_extension("tmp");
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&encode_samples(samples)).map_err(|e| Error::io(&tmp, e))?;
        let bytes = enc.finish().map_err(|e| Error::io(&tmp, e))?;
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

fn encode_samples(samples: &[SliceSample]) -> Vec<u8> {
    let mut out = CACHE_MAGIC.to_vec();
    out.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    for s in samples {
        let meta = serde_json::to_vec(&(&s.provenance, s.native_dims, s.image.dim())).expect("plain data");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for &v in s.image.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(s.mask.iter().copied());
    }
    out
}

fn decode_samples(bytes: &[u8]) -> Result<Vec<SliceSample>> {
    let bad = |m: &str| Error::parse("sample cache", "payload", m.to_string());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != CACHE_MAGIC {
        return Err(bad("bad magic"));
    }
    let count = LittleEndian::read_u64(take(8)?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let meta_len = LittleEndian::read_u64(take(8)?) as usize;
        let (provenance, native_dims, dims): (Provenance, (usize, usize), (usize, usize)) =
            serde_json::from_slice(take(meta_len)?)?;
        let n = dims.0 * dims.1;
        let image: Vec<f32> = take(4 * n)?.chunks_exact(4).map(LittleEndian::read_f32).collect();
        let mask = take(n)?.to_vec();
        out.push(SliceSample {
            image: Array2::from_shape_vec(dims, image).map_err(|_| bad("image shape"))?,
            mask: Array2::from_shape_vec(dims, mask).map_err(|_| bad("mask shape"))?,
            provenance,
            native_dims,
        });
    }
    Ok(out)
}

/// [`volume_to_samples`] behind an optional cache.
pub fn cached_volume_to_samples(
    vol: &Volume,
    mask: &MaskVolume,
    params: &PreprocessParams,
    cache: Option<&SampleCache>,
) -> Result<Vec<SliceSample>> {
    let Some(cache) = cache else {
        return volume_to_samples(vol, mask, params);
    };
    let key = SampleCache::key(vol.dataset, &vol.case_id, params);
    if let Ok(Some(hit)) = cache.load(&key) {
        return Ok(hit);
    }
    let samples = volume_to_samples(vol, mask, params)?;
    cache.store(&key, &samples)?;
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use tempfile::tempdir;

    #[test]
    fn constant_image_maps_to_constant() {
        let img = Array2::from_elem((16, 16), 0.7f32);
        let out = adaptive_hist_eq(&img.view(), 2.0, (8, 8)).unwrap();
        let v = out[[0, 0]];
        assert!((0.0..=1.0).contains(&v));
        assert!(out.iter().all(|&x| x == v));
    }

    #[test]
    fn non_finite_rejected() {
        let mut img = Array2::from_elem((4, 4), 0.0f32);
        img[[1, 1]] = f32::NAN;
        assert!(adaptive_hist_eq(&img.view(), 2.0, (2, 2)).is_err());
    }

    #[test]
    fn output_in_unit_interval() {
        let img = Array2::from_shape_fn((37, 29), |(y, x)| ((y * 31 + x * 17) % 23) as f32 * 3.1 - 9.0);
        let out = adaptive_hist_eq(&img.view(), 2.0, (8, 8)).unwrap();
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn normalize_examples() {
        let out = normalize(&array![[0.0f32, 2.0]].view());
        assert_eq!(out, array![[-1.0f32, 1.0]]);
        assert!(normalize(&Array2::from_elem((3, 3), 4.2f32).view()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_corners_preserved() {
        let img = array![[0.0f32, 1.0], [1.0, 0.0]];
        let out = resize_bilinear(&img.view(), (4, 4));
        assert_eq!([out[[0, 0]], out[[0, 3]], out[[3, 0]], out[[3, 3]]], [0.0, 1.0, 1.0, 0.0]);
        // Hand-evaluated: output (1, 1) samples source (0.25, 0.25).
        let expected = 0.75 * (0.75 * 0.0 + 0.25 * 1.0) + 0.25 * (0.75 * 1.0 + 0.25 * 0.0);
        assert!((out[[1, 1]] as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn resize_identity_and_binarity() {
        let img = Array2::from_shape_fn((12, 12), |(y, x)| (y * x) as f32);
        let mask = Array2::from_shape_fn((12, 12), |(y, x)| u8::from(y > x));
        let (i2, m2) = resize(&img.view(), &mask.view(), (12, 12)).unwrap();
        assert_eq!((i2, m2), (img.clone(), mask.clone()));
        let (_, m3) = resize(&img.view(), &mask.view(), (7, 19)).unwrap();
        assert!(m3.iter().all(|&v| v <= 1));
        assert!(resize(&img.view(), &mask.view(), (0, 4)).is_err());
    }

    fn volume(depth: usize) -> (Volume, MaskVolume) {
        let v = Array3::from_shape_fn((depth, 10, 12), |(k, y, x)| (k + y * x) as f32);
        let vol = Volume::new(v, [1.0; 3], "c", DatasetId::Promise12).unwrap();
        let mask = MaskVolume::new(Array3::zeros((depth, 10, 12)), [1.0; 3], "c", DatasetId::Promise12).unwrap();
        (vol, mask)
    }

    #[test]
    fn one_sample_per_slice() {
        let (vol, mask) = volume(5);
        let params = PreprocessParams {
            resolution: 16,
            ..Default::default()
        };
        let s = volume_to_samples(&vol, &mask, &params).unwrap();
        assert_eq!(s.len(), 5);
        for (k, smp) in s.iter().enumerate() {
            assert_eq!(smp.provenance.slice_index, k);
            assert_eq!(smp.image.dim(), (16, 16));
            assert_eq!(smp.native_dims, (10, 12));
            assert!(smp.mask.iter().all(|&v| v == 0));
        }
        let skip = PreprocessParams {
            skip_empty_slices: true,
            ..params
        };
        assert!(volume_to_samples(&vol, &mask, &skip).unwrap().is_empty());
        let (vol2, _) = volume(4);
        assert!(volume_to_samples(&vol2, &mask, &params).is_err());
    }

    #[test]
    fn cache_roundtrip() {
        let dir = tempdir().unwrap();
        let cache = SampleCache::new(dir.path());
        let (vol, mask) = volume(3);
        let params = PreprocessParams {
            resolution: 8,
            ..Default::default()
        };
        let a = cached_volume_to_samples(&vol, &mask, &params, Some(&cache)).unwrap();
        let key = SampleCache::key(vol.dataset, &vol.case_id, &params);
        assert_eq!(cache.load(&key).unwrap().unwrap(), a);
        assert_eq!(cached_volume_to_samples(&vol, &mask, &params, Some(&cache)).unwrap(), a);
    }
}
