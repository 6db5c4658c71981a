use ndarray::{s, Array2, Array3};
use prostate_seg::preprocess::{adaptive_hist_eq, normalize, resize, volume_to_samples, PreprocessParams, HIST_BINS};
use prostate_seg::volume_io::{DatasetId, MaskVolume, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Intensity bin of each pixel after global min-max scaling.
fn bins(img: &Array2<f32>) -> Array2<usize> {
    let lo = img.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    img.mapv(|v| {
        let s = (v - lo) as f64 / (hi - lo) as f64;
        ((s * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
    })
}

/// Plain histogram equalisation of `region`: the mid-rank of each pixel's
/// bin among the region's pixels.
fn he_oracle(region: &[usize], b: usize) -> f64 {
    let below = region.iter().filter(|&&v| v < b).count() as f64;
    let equal = region.iter().filter(|&&v| v == b).count() as f64;
    (below + 0.5 * equal) / region.len() as f64
}

/// Largest gap between the empirical CDF of `xs` and the uniform CDF.
fn ks_uniform(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn clahe_constant_image_gives_constant_output() {
    let img = Array2::from_elem((17, 23), 0.7f32);
    let out = adaptive_hist_eq(&img.view(), 2.0, (4, 4)).unwrap();
    let first = out[[0, 0]];
    assert!((0.0..=1.0).contains(&first));
    assert!(out.iter().all(|&v| v == first));
}

#[test]
fn clahe_rejects_non_finite() {
    let mut img = Array2::from_elem((8, 8), 1.0f32);
    img[[3, 3]] = f32::INFINITY;
    assert!(adaptive_hist_eq(&img.view(), 2.0, (2, 2)).is_err());
}

#[test]
fn clahe_two_tiles_flatten_each_tile() {
    // Left half a dark vertical ramp, right half a bright one. With two tiles
    // across, the columns left of the left-tile centre and right of the
    // right-tile centre use a single tile's mapping.
    let (h, w) = (128, 64);
    let img = Array2::from_shape_fn((h, w), |(y, x)| {
        let t = y as f32 / (h - 1) as f32;
        if x < w / 2 {
            0.4 * t
        } else {
            0.6 + 0.4 * t
        }
    });
    let out = adaptive_hist_eq(&img.view(), f64::INFINITY, (1, 2)).unwrap();
    let b = bins(&img);
    let left: Vec<usize> = b.slice(s![.., ..w / 2]).iter().copied().collect();
    let right: Vec<usize> = b.slice(s![.., w / 2..]).iter().copied().collect();

    let (mut left_out, mut right_out) = (Vec::new(), Vec::new());
    for y in 0..h {
        for x in 0..w {
            let centre_left = (w / 2) as f64 / 2.0 - 0.5;
            let centre_right = (w / 2 + w) as f64 / 2.0 - 0.5;
            let v = out[[y, x]] as f64;
            if (x as f64) <= centre_left {
                assert!((v - he_oracle(&left, b[[y, x]])).abs() < 1e-6, "left ({y},{x})");
                left_out.push(v);
            } else if (x as f64) >= centre_right {
                assert!((v - he_oracle(&right, b[[y, x]])).abs() < 1e-6, "right ({y},{x})");
                right_out.push(v);
            }
        }
    }
    assert!(ks_uniform(&mut left_out) <= 0.05);
    assert!(ks_uniform(&mut right_out) <= 0.05);
}

#[test]
fn clahe_without_clipping_on_one_tile_is_global_he() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let img = Array2::from_shape_fn((40, 33), |_| rng.random_range(0.0f32..1.0).powi(3));
    let b = bins(&img);
    let all: Vec<usize> = b.iter().copied().collect();
    for clip in [f64::INFINITY, 1e12] {
        let out = adaptive_hist_eq(&img.view(), clip, (1, 1)).unwrap();
        for ((y, x), &v) in out.indexed_iter() {
            assert!((v as f64 - he_oracle(&all, b[[y, x]])).abs() < 1e-6);
        }
    }
}

#[test]
fn clahe_clipping_limits_contrast() {
    // A narrow band of intensities plus the two extremes. Plain equalisation
    // stretches the band over most of [0, 1]; clipping keeps it compact.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut img = Array2::from_shape_fn((32, 32), |_| rng.random_range(0.40f32..0.45));
    img[[0, 0]] = 0.0;
    img[[0, 1]] = 1.0;
    let band_span = |a: &Array2<f32>| {
        let band = a.iter().skip(2);
        band.clone().copied().fold(f32::NEG_INFINITY, f32::max) - band.copied().fold(f32::INFINITY, f32::min)
    };
    let plain = adaptive_hist_eq(&img.view(), f64::INFINITY, (1, 1)).unwrap();
    let clipped = adaptive_hist_eq(&img.view(), 2.0, (1, 1)).unwrap();
    assert!(band_span(&plain) > 0.9);
    assert!(band_span(&clipped) < 0.5 * band_span(&plain));
    assert!(clipped.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn normalize_examples() {
    let two = Array2::from_shape_vec((1, 2), vec![0.0f32, 2.0]).unwrap();
    assert_eq!(normalize(&two.view()).into_raw_vec_and_offset().0, vec![-1.0, 1.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let img = Array2::from_shape_fn((24, 31), |_| rng.random_range(-50.0f32..300.0));
        let n = normalize(&img.view());
        let mean = n.iter().map(|&v| v as f64).sum::<f64>() / n.len() as f64;
        let var = n.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n.len() as f64;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-4);
    }

    let flat = Array2::from_elem((5, 5), 3.25f32);
    assert!(normalize(&flat.view()).iter().all(|&v| v == 0.0));
}

#[test]
fn resize_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = Array2::from_shape_fn((448, 448), |_| rng.random::<f32>());
    let mask = Array2::from_shape_fn((448, 448), |_| u8::from(rng.random_bool(0.3)));
    let (i2, m2) = resize(&img.view(), &mask.view(), (448, 448)).unwrap();
    assert_eq!(i2, img);
    assert_eq!(m2, mask);
}

#[test]
fn resize_two_by_two_bilinear() {
    let img = Array2::from_shape_vec((2, 2), vec![0.0f32, 1.0, 1.0, 0.0]).unwrap();
    let mask = Array2::<u8>::zeros((2, 2));
    let (out, _) = resize(&img.view(), &mask.view(), (4, 4)).unwrap();
    // Half-pixel centres: output i samples source (i + 0.5) / 2 - 0.5,
    // clamped to the edge, giving fractional offsets 0, 1/4, 3/4, 1.
    let f = [0.0, 0.25, 0.75, 1.0];
    for y in 0..4 {
        for x in 0..4 {
            let (fy, fx) = (f[y], f[x]);
            let want = (1.0 - fy) * fx + fy * (1.0 - fx);
            assert!((out[[y, x]] as f64 - want).abs() < 1e-7, "({y},{x})");
        }
    }
    assert_eq!([out[[0, 0]], out[[0, 3]], out[[3, 0]], out[[3, 3]]], [0.0, 1.0, 1.0, 0.0]);
}

#[test]
fn resized_masks_stay_binary() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(1..40), rng.random_range(1..40));
        let out = (rng.random_range(1..60), rng.random_range(1..60));
        let img = Array2::from_shape_fn((h, w), |_| rng.random::<f32>());
        let mask = Array2::from_shape_fn((h, w), |_| u8::from(rng.random_bool(0.5)));
        let (i2, m2) = resize(&img.view(), &mask.view(), out).unwrap();
        assert_eq!(i2.dim(), out);
        assert!(m2.iter().all(|&v| v <= 1));
    }
    let img = Array2::<f32>::zeros((3, 3));
    let mask = Array2::<u8>::zeros((3, 3));
    assert!(resize(&img.view(), &mask.view(), (0, 4)).is_err());
}

fn case(depth: usize, fg: bool) -> (Volume, MaskVolume) {
    let mut rng = ChaCha8Rng::seed_from_u64(depth as u64);
    let vox = Array3::from_shape_fn((depth, 20, 24), |_| rng.random_range(0.0f32..1000.0));
    let labels = Array3::from_shape_fn((depth, 20, 24), |(_, y, x)| u8::from(fg && (5..15).contains(&y) && (6..18).contains(&x)));
    (
        Volume::new(vox, [0.7, 0.7, 3.0], "c", DatasetId::Prostatex).unwrap(),
        MaskVolume::new(labels, [0.7, 0.7, 3.0], "c", DatasetId::Prostatex).unwrap(),
    )
}

fn params(resolution: usize) -> PreprocessParams {
    PreprocessParams {
        resolution,
        clahe_grid: (2, 2),
        ..PreprocessParams::default()
    }
}

#[test]
fn five_slices_give_five_samples() {
    let (v, m) = case(5, true);
    let samples = volume_to_samples(&v, &m, &params(32)).unwrap();
    assert_eq!(samples.len(), 5);
    for (k, s) in samples.iter().enumerate() {
        assert_eq!(s.provenance.slice_index, k);
        assert_eq!(s.provenance.case_id, "c");
        assert_eq!(s.provenance.dataset, DatasetId::Prostatex);
        assert_eq!(s.image.dim(), (32, 32));
        assert_eq!(s.mask.dim(), (32, 32));
        assert!(s.mask.iter().any(|&v| v == 1));
    }
}

#[test]
fn background_only_slices_are_kept() {
    let (v, m) = case(4, false);
    let samples = volume_to_samples(&v, &m, &params(16)).unwrap();
    assert_eq!(samples.len(), 4);
    assert!(samples.iter().all(|s| s.mask.iter().all(|&v| v == 0)));
}

#[test]
fn mismatched_dims_rejected() {
    let (v, _) = case(3, true);
    let (_, m) = case(4, true);
    assert!(volume_to_samples(&v, &m, &params(16)).is_err());
}

#[test]
fn slice_count_is_conserved() {
    for depth in 1..=9 {
        let (v, m) = case(depth, depth % 2 == 0);
        assert_eq!(volume_to_samples(&v, &m, &params(8)).unwrap().len(), depth);
    }
}
