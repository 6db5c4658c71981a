//! Training-time augmentation: flips, rotation, translation, brightness,
//! contrast and additive Gaussian noise.
//!
//! Geometric ops move image and mask together (mask by nearest neighbour);
//! photometric ops touch the image only. Every random draw comes from the
//! caller's RNG, in a fixed order, so equal RNG state gives equal output.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::SliceSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub max_rotation_deg: f64,
    pub max_translate_frac: f64,
    pub p_flip_h: f64,
    pub p_flip_v: f64,
    pub p_rotate: f64,
    pub p_translate: f64,
    /// Brightness offset drawn from `±brightness_jitter`.
    pub brightness_jitter: f64,
    /// Contrast factor drawn from `1 ± contrast_jitter`.
    pub contrast_jitter: f64,
    pub p_brightness: f64,
    pub p_contrast: f64,
    pub noise_sigma: f64,
    pub p_noise: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            max_rotation_deg: 10.0,
            max_translate_frac: 0.1,
            p_flip_h: 0.5,
            p_flip_v: 0.5,
            p_rotate: 0.5,
            p_translate: 0.5,
            brightness_jitter: 0.2,
            contrast_jitter: 0.2,
            p_brightness: 0.5,
            p_contrast: 0.5,
            noise_sigma: 0.05,
            p_noise: 0.5,
        }
    }
}

impl AugmentPolicy {
    /// Every probability zero: augmentation is the identity.
    pub fn none() -> Self {
        AugmentPolicy {
            p_flip_h: 0.0,
            p_flip_v: 0.0,
            p_rotate: 0.0,
            p_translate: 0.0,
            p_brightness: 0.0,
            p_contrast: 0.0,
            p_noise: 0.0,
            ..AugmentPolicy::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_flip_h", self.p_flip_h),
            ("p_flip_v", self.p_flip_v),
            ("p_rotate", self.p_rotate),
            ("p_translate", self.p_translate),
            ("p_brightness", self.p_brightness),
            ("p_contrast", self.p_contrast),
            ("p_noise", self.p_noise),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} must be in [0, 1], got {p}")));
            }
        }
        let mags = [
            ("max_rotation_deg", self.max_rotation_deg),
            ("max_translate_frac", self.max_translate_frac),
            ("brightness_jitter", self.brightness_jitter),
            ("contrast_jitter", self.contrast_jitter),
            ("noise_sigma", self.noise_sigma),
        ];
        for (name, m) in mags {
            if !(m >= 0.0 && m.is_finite()) {
                return Err(Error::Config(format!("augment.{name} must be >= 0, got {m}")));
            }
        }
        Ok(())
    }
}

/// Seed for the augmentation stream of one sample in one epoch.
pub fn sample_seed(global_seed: u64, epoch: u64, sample_index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(mix(global_seed) ^ epoch) ^ sample_index)
}

pub fn sample_rng(global_seed: u64, epoch: u64, sample_index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sample_seed(global_seed, epoch, sample_index))
}

pub fn flip_h<T: Clone>(a: &ArrayView2<T>) -> Array2<T> {
    let mut v = a.to_owned();
    v.invert_axis(Axis(1));
    v.as_standard_layout().into_owned()
}

pub fn flip_v<T: Clone>(a: &ArrayView2<T>) -> Array2<T> {
    let mut v = a.to_owned();
    v.invert_axis(Axis(0));
    v.as_standard_layout().into_owned()
}

/// Rotation by `angle_deg` about the image centre followed by a shift of
/// `(dy, dx)` pixels. Out-of-frame pixels take the image minimum and mask 0.
pub fn rotate_translate(
    image: &ArrayView2<f32>,
    mask: &ArrayView2<u8>,
    angle_deg: f64,
    shift: (f64, f64),
) -> (Array2<f32>, Array2<u8>) {
    let (h, w) = image.dim();
    let fill = image.iter().copied().fold(f32::INFINITY, f32::min);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = angle_deg.to_radians().sin_cos();
    let mut img = Array2::from_elem((h, w), fill);
    let mut msk = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            // Inverse map: undo the shift, then rotate by -angle.
            let (py, px) = (y as f64 - cy - shift.0, x as f64 - cx - shift.1);
            let sy = c * py - s * px + cy;
            let sx = s * py + c * px + cx;
            let (ny, nx) = (sy.round(), sx.round());
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                msk[[y, x]] = mask[[ny as usize, nx as usize]];
            }
            if sy < -0.5 || sx < -0.5 || sy > h as f64 - 0.5 || sx > w as f64 - 0.5 {
                continue;
            }
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let v = (1.0 - fy) * ((1.0 - fx) * image[[y0, x0]] as f64 + fx * image[[y0, x1]] as f64)
                + fy * ((1.0 - fx) * image[[y1, x0]] as f64 + fx * image[[y1, x1]] as f64);
            img[[y, x]] = v as f32;
        }
    }
    (img, msk)
}

pub fn augment_sample<R: Rng + ?Sized>(s: &SliceSample, rng: &mut R, policy: &AugmentPolicy) -> SliceSample {
    let mut out = s.clone();
    let hit = |p: f64, rng: &mut R| p > 0.0 && rng.random::<f64>() < p;

    if hit(policy.p_flip_h, rng) {
        out.image = flip_h(&out.image.view());
        out.mask = flip_h(&out.mask.view());
    }
    if hit(policy.p_flip_v, rng) {
        out.image = flip_v(&out.image.view());
        out.mask = flip_v(&out.mask.view());
    }
    let angle = if hit(policy.p_rotate, rng) {
        rng.random_range(-1.0..=1.0) * policy.max_rotation_deg
    } else {
        0.0
    };
    let shift = if hit(policy.p_translate, rng) {
        let (h, w) = out.image.dim();
        let f = policy.max_translate_frac;
        (
            (rng.random_range(-1.0..=1.0) * f * h as f64).round(),
            (rng.random_range(-1.0..=1.0) * f * w as f64).round(),
        )
    } else {
        (0.0, 0.0)
    };
    if angle != 0.0 || shift != (0.0, 0.0) {
        let (img, msk) = rotate_translate(&out.image.view(), &out.mask.view(), angle, shift);
        out.image = img;
        out.mask = msk;
    }

    if hit(policy.p_contrast, rng) {
        let factor = 1.0 + rng.random_range(-1.0..=1.0) * policy.contrast_jitter;
        let mean = out.image.iter().map(|&v| v as f64).sum::<f64>() / out.image.len().max(1) as f64;
        out.image.mapv_inplace(|v| ((v as f64 - mean) * factor + mean) as f32);
    }
    if hit(policy.p_brightness, rng) {
        let offset = (rng.random_range(-1.0..=1.0) * policy.brightness_jitter) as f32;
        out.image.mapv_inplace(|v| v + offset);
    }
    if hit(policy.p_noise, rng) && policy.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, policy.noise_sigma).expect("sigma > 0");
        for v in out.image.iter_mut() {
            *v += normal.sample(rng) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dsc_arrays;
    use crate::preprocess::Provenance;
    use crate::volume_io::DatasetId;
    use ndarray::s;

    fn square(n: usize, side: usize) -> SliceSample {
        let lo = (n - side) / 2;
        let mut mask = Array2::zeros((n, n));
        mask.slice_mut(s![lo..lo + side, lo..lo + side]).fill(1u8);
        let image = Array2::from_shape_fn((n, n), |(y, x)| (y * n + x) as f32 / (n * n) as f32);
        SliceSample::new(
            image,
            mask,
            Provenance {
                dataset: DatasetId::Promise12,
                case_id: "c".into(),
                slice_index: 0,
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let s = square(32, 10);
        let mut rng = sample_rng(1, 0, 0);
        assert_eq!(augment_sample(&s, &mut rng, &AugmentPolicy::none()), s);
    }

    #[test]
    fn flip_is_an_involution() {
        let s = square(16, 5);
        let img = flip_h(&flip_h(&s.image.view()).view());
        assert_eq!(img, s.image);
        assert_eq!(flip_v(&flip_v(&s.mask.view()).view()), s.mask);
        assert_ne!(flip_h(&s.image.view()), s.image);
    }

    #[test]
    fn rotation_roundtrip_keeps_square() {
        let s = square(200, 100);
        let (i1, m1) = rotate_translate(&s.image.view(), &s.mask.view(), 10.0, (0.0, 0.0));
        let (_, m2) = rotate_translate(&i1.view(), &m1.view(), -10.0, (0.0, 0.0));
        let d = dsc_arrays(&m2.view(), &s.mask.view()).unwrap();
        assert!(d >= 0.95, "dsc {d}");
    }

    #[test]
    fn deterministic_and_mask_binary() {
        let s = square(48, 20);
        let p = AugmentPolicy {
            p_flip_h: 1.0,
            p_rotate: 1.0,
            p_translate: 1.0,
            p_noise: 1.0,
            ..AugmentPolicy::default()
        };
        let a = augment_sample(&s, &mut sample_rng(7, 3, 11), &p);
        let b = augment_sample(&s, &mut sample_rng(7, 3, 11), &p);
        assert_eq!(a, b);
        assert!(a.mask.iter().all(|&v| v <= 1));
        let c = augment_sample(&s, &mut sample_rng(7, 4, 11), &p);
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn photometric_ops_leave_mask_alone() {
        let s = square(32, 12);
        let p = AugmentPolicy {
            p_brightness: 1.0,
            p_contrast: 1.0,
            p_noise: 1.0,
            ..AugmentPolicy::none()
        };
        let a = augment_sample(&s, &mut sample_rng(3, 0, 0), &p);
        assert_eq!(a.mask, s.mask);
        assert_ne!(a.image, s.image);
    }

    #[test]
    fn out_of_frame_fill() {
        let s = square(20, 8);
        let (img, msk) = rotate_translate(&s.image.view(), &s.mask.view(), 0.0, (0.0, 5.0));
        assert!(img.slice(s![.., 0..5]).iter().all(|&v| v == 0.0));
        assert!(msk.slice(s![.., 0..5]).iter().all(|&v| v == 0));
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentPolicy::default().validate().is_ok());
        let bad = AugmentPolicy {
            p_flip_h: 1.5,
            ..AugmentPolicy::default()
        };
        assert!(bad.validate().is_err());
    }
}
