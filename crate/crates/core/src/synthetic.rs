//! Deterministic synthetic stand-ins for the four datasets.
//!
//! Each family draws one bright shape per slice (circle, ellipse, square or
//! crescent) on a family-specific background, and writes cases in the
//! `CaseNN.mhd` / `CaseNN_segmentation.mhd` layout.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::sample_seed;
use crate::error::{Error, Result};
use crate::volume_io::metaimage::{write_metaimage, ElementType};
use crate::volume_io::{DatasetId, Spacing};

pub const DEFAULT_DIMS: (usize, usize, usize) = (8, 448, 448);
pub const MIN_CASES: usize = 5;
/// Declared range of the per-family mean foreground fraction.
pub const FOREGROUND_RANGE: (f64, f64) = (0.02, 0.10);
const SPACING: Spacing = [0.625, 0.625, 3.6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Circles,
    Ellipses,
    Squares,
    Crescents,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Circles, Family::Ellipses, Family::Squares, Family::Crescents];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Circles => "circles",
            Family::Ellipses => "ellipses",
            Family::Squares => "squares",
            Family::Crescents => "crescents",
        }
    }

    /// The dataset each family stands in for.
    pub fn dataset(self) -> DatasetId {
        match self {
            Family::Circles => DatasetId::Promise12,
            Family::Ellipses => DatasetId::Prostatex,
            Family::Squares => DatasetId::Decathlon,
            Family::Crescents => DatasetId::Isbi2013,
        }
    }

    pub fn for_dataset(d: DatasetId) -> Family {
        Family::ALL
            .into_iter()
            .find(|f| f.dataset() == d)
            .expect("one family per dataset")
    }

    fn index(self) -> u64 {
        Family::ALL.iter().position(|f| *f == self).expect("listed") as u64
    }

    fn style(self) -> Style {
        match self {
            Family::Circles => Style {
                background: 220.0,
                foreground: 900.0,
                noise: 45.0,
                gradient: 0.0,
                texture: 0.0,
                texture_period: 1.0,
                distractor: Distractor::Dots(3),
                rim: None,
                halo: None,
            },
            Family::Ellipses => Style {
                background: 420.0,
                foreground: 750.0,
                noise: 70.0,
                gradient: 260.0,
                texture: 0.0,
                texture_period: 1.0,
                distractor: Distractor::Bar,
                rim: Some((0.025, 0.4)),
                halo: None,
            },
            Family::Squares => Style {
                background: 160.0,
                foreground: 620.0,
                noise: 25.0,
                gradient: 0.0,
                texture: 90.0,
                texture_period: 0.11,
                distractor: Distractor::Ring,
                rim: None,
                halo: Some((0.025, 0.55)),
            },
            Family::Crescents => Style {
                background: 300.0,
                foreground: 1100.0,
                noise: 110.0,
                gradient: 120.0,
                texture: 60.0,
                texture_period: 0.05,
                distractor: Distractor::Blocks(2),
                rim: None,
                halo: None,
            },
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown family `{s}`")))
    }
}

/// Intensity model of a family. Values are in raw scanner-like units.
#[derive(Debug, Clone, Copy)]
struct Style {
    background: f64,
    foreground: f64,
    noise: f64,
    /// Peak-to-peak amplitude of a linear background ramp.
    gradient: f64,
    /// Amplitude of a sinusoidal background pattern.
    texture: f64,
    /// Pattern period as a fraction of the image width.
    texture_period: f64,
    distractor: Distractor,
    /// Labelled band just inside the boundary: (width as a fraction of the
    /// image side, brightness relative to the foreground step).
    rim: Option<(f64, f64)>,
    /// Unlabelled band just outside the boundary, same parametrisation.
    halo: Option<(f64, f64)>,
}

/// Unlabelled bright structures, one kind per family.
#[derive(Debug, Clone, Copy)]
enum Distractor {
    Dots(usize),
    Bar,
    Ring,
    Blocks(usize),
}

/// One slice's foreground shape, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Circle { cy: f64, cx: f64, r: f64 },
    Ellipse { cy: f64, cx: f64, a: f64, b: f64, theta: f64 },
    Square { cy: f64, cx: f64, half: f64, theta: f64 },
    /// Disc of radius `r` minus a disc of radius `inner` centred at
    /// `(cy + off_y, cx + off_x)`.
    Crescent { cy: f64, cx: f64, r: f64, inner: f64, off_y: f64, off_x: f64 },
}

fn rotate(dy: f64, dx: f64, theta: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (c * dy - s * dx, s * dy + c * dx)
}

impl Shape {
    /// Whether pixel `(y, x)` lies inside the shape.
    pub fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Circle { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Ellipse { cy, cx, a, b, theta } => {
                let (u, v) = rotate(y - cy, x - cx, theta);
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            Shape::Square { cy, cx, half, theta } => {
                let (u, v) = rotate(y - cy, x - cx, theta);
                u.abs().max(v.abs()) <= half
            }
            Shape::Crescent { cy, cx, r, inner, off_y, off_x } => {
                (y - cy).powi(2) + (x - cx).powi(2) <= r * r
                    && (y - cy - off_y).powi(2) + (x - cx - off_x).powi(2) > inner * inner
            }
        }
    }

    pub fn centre(&self) -> (f64, f64) {
        match *self {
            Shape::Circle { cy, cx, .. }
            | Shape::Ellipse { cy, cx, .. }
            | Shape::Square { cy, cx, .. }
            | Shape::Crescent { cy, cx, .. } => (cy, cx),
        }
    }

    /// Radius of a disc about [`Shape::centre`] that covers the shape.
    pub fn extent(&self) -> f64 {
        match *self {
            Shape::Circle { r, .. } | Shape::Crescent { r, .. } => r,
            Shape::Ellipse { a, b, .. } => a.max(b),
            Shape::Square { half, .. } => half * std::f64::consts::SQRT_2,
        }
    }

    /// The shape with its boundary moved outwards by `delta` pixels
    /// (inwards when negative).
    pub fn offset(&self, delta: f64) -> Shape {
        match *self {
            Shape::Circle { cy, cx, r } => Shape::Circle { cy, cx, r: (r + delta).max(0.0) },
            Shape::Ellipse { cy, cx, a, b, theta } => Shape::Ellipse {
                cy,
                cx,
                a: (a + delta).max(1e-6),
                b: (b + delta).max(1e-6),
                theta,
            },
            Shape::Square { cy, cx, half, theta } => Shape::Square {
                cy,
                cx,
                half: (half + delta).max(0.0),
                theta,
            },
            Shape::Crescent { cy, cx, r, inner, off_y, off_x } => Shape::Crescent {
                cy,
                cx,
                r: (r + delta).max(0.0),
                inner: (inner - delta).max(0.0),
                off_y,
                off_x,
            },
        }
    }

    pub fn rasterize(&self, h: usize, w: usize) -> Array2<u8> {
        Array2::from_shape_fn((h, w), |(y, x)| u8::from(self.contains(y as f64, x as f64)))
    }
}

/// One generated case: voxels, labels and the shape drawn on each slice.
#[derive(Debug, Clone)]
pub struct SyntheticCase {
    pub case_id: String,
    pub image: Array3<f32>,
    pub mask: Array3<u8>,
    pub shapes: Vec<Shape>,
    /// Unlabelled structures drawn at foreground brightness on every slice.
    pub distractors: Vec<Shape>,
}

pub fn case_id(index: usize) -> String {
    format!("Case{index:02}")
}

/// Shapes for all slices of one case. Sizes follow a gland-like profile,
/// largest in the middle slices.
fn case_shapes(family: Family, rng: &mut ChaCha8Rng, dims: (usize, usize, usize)) -> Vec<Shape> {
    let (d, h, w) = dims;
    let side = h.min(w) as f64;
    let mid_fraction: f64 = rng.random_range(0.05..0.09);
    let cy0 = h as f64 / 2.0 + rng.random_range(-0.08..0.08) * side;
    let cx0 = w as f64 / 2.0 + rng.random_range(-0.08..0.08) * side;
    let theta0 = rng.random_range(0.0..PI);
    let aspect: f64 = rng.random_range(1.6..2.2);
    let phi0 = rng.random_range(0.0..2.0 * PI);
    let centre = (d as f64 - 1.0) / 2.0;
    (0..d)
        .map(|k| {
            let t = (k as f64 - centre) / (centre + 1.0);
            let area = mid_fraction * (1.0 - 0.6 * t * t) * (h * w) as f64;
            let r_eq = (area / PI).sqrt();
            let cy = cy0 + rng.random_range(-0.01..0.01) * side;
            let cx = cx0 + rng.random_range(-0.01..0.01) * side;
            let theta = theta0 + 0.05 * k as f64;
            match family {
                Family::Circles => Shape::Circle { cy, cx, r: r_eq },
                Family::Ellipses => Shape::Ellipse {
                    cy,
                    cx,
                    a: r_eq * aspect.sqrt(),
                    b: r_eq / aspect.sqrt(),
                    theta,
                },
                Family::Squares => Shape::Square {
                    cy,
                    cx,
                    half: r_eq * PI.sqrt() / 2.0,
                    theta,
                },
                Family::Crescents => {
                    let r = r_eq * 1.25;
                    let phi = phi0 + 0.05 * k as f64;
                    Shape::Crescent {
                        cy,
                        cx,
                        r,
                        inner: 0.6 * r,
                        off_y: 0.45 * r * phi.sin(),
                        off_x: 0.45 * r * phi.cos(),
                    }
                }
            }
        })
        .collect()
}

/// Places the family's distractors clear of the labelled shapes.
fn case_distractors(kind: Distractor, rng: &mut ChaCha8Rng, dims: (usize, usize, usize), shapes: &[Shape]) -> Vec<Shape> {
    let (_, h, w) = dims;
    let side = h.min(w) as f64;
    let (count, size) = match kind {
        Distractor::Dots(n) => (n, 0.03),
        Distractor::Bar => (1, 0.12),
        Distractor::Ring => (1, 0.13),
        Distractor::Blocks(n) => (n, 0.09),
    };
    let size = size * side;
    let (my, mx) = shapes[shapes.len() / 2].centre();
    let reach = shapes.iter().map(Shape::extent).fold(0.0, f64::max);
    let mut placed: Vec<Shape> = Vec::new();
    for _ in 0..500 {
        if placed.len() == count {
            break;
        }
        let cy = rng.random_range(0.1..0.9) * h as f64;
        let cx = rng.random_range(0.1..0.9) * w as f64;
        let theta = rng.random_range(0.0..PI);
        let clear_main = (cy - my).hypot(cx - mx) > reach + size + 0.03 * side;
        let clear_rest = placed.iter().all(|p| {
            let (py, px) = p.centre();
            (cy - py).hypot(cx - px) > p.extent() + size + 0.02 * side
        });
        if !(clear_main && clear_rest) {
            continue;
        }
        placed.push(match kind {
            Distractor::Dots(_) => Shape::Circle { cy, cx, r: size },
            Distractor::Bar => Shape::Ellipse {
                cy,
                cx,
                a: size,
                b: 0.1 * size,
                theta,
            },
            Distractor::Ring => Shape::Crescent {
                cy,
                cx,
                r: size,
                inner: 0.6 * size,
                off_y: 0.0,
                off_x: 0.0,
            },
            Distractor::Blocks(_) => Shape::Square { cy, cx, half: size, theta },
        });
    }
    placed
}

/// Generates case `index` of a family. Deterministic in
/// `(family, seed, index, dims)`.
pub fn generate_case(family: Family, seed: u64, index: usize, dims: (usize, usize, usize)) -> SyntheticCase {
    let (d, h, w) = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, family.index(), index as u64));
    let shapes = case_shapes(family, &mut rng, dims);
    let style = family.style();
    let distractors = case_distractors(style.distractor, &mut rng, dims, &shapes);
    let noise = Normal::new(0.0, style.noise).expect("positive sigma");
    let ramp_dir = rng.random_range(0.0..2.0 * PI);
    let tex_phase = rng.random_range(0.0..2.0 * PI);
    let tex_dir = rng.random_range(0.0..PI);
    let period = style.texture_period * w as f64;
    let (rs, rc) = ramp_dir.sin_cos();
    let (ts, tc) = tex_dir.sin_cos();

    let mut extra = Array2::<u8>::zeros((h, w));
    for s in &distractors {
        extra = extra | s.rasterize(h, w);
    }
    let mut image = Array3::<f32>::zeros(dims);
    let mut mask = Array3::<u8>::zeros(dims);
    for k in 0..d {
        let m = shapes[k].rasterize(h, w);
        let side = h.min(w) as f64;
        let core = match style.rim {
            Some((width, _)) => shapes[k].offset(-width * side).rasterize(h, w),
            None => m.clone(),
        };
        let halo = style
            .halo
            .map(|(width, _)| shapes[k].offset(width * side).rasterize(h, w));
        let step = style.foreground - style.background;
        let mut img = image.index_axis_mut(Axis(0), k);
        for y in 0..h {
            for x in 0..w {
                let ny = y as f64 / h as f64 - 0.5;
                let nx = x as f64 / w as f64 - 0.5;
                let mut v = style.background + style.gradient * (rs * ny + rc * nx);
                if style.texture > 0.0 {
                    let s = (ts * y as f64 + tc * x as f64) / period;
                    v += style.texture * (2.0 * PI * s + tex_phase).sin();
                }
                if core[[y, x]] != 0 || extra[[y, x]] != 0 {
                    v += step;
                } else if m[[y, x]] != 0 {
                    v += step * style.rim.map_or(1.0, |r| r.1);
                } else if halo.as_ref().is_some_and(|b| b[[y, x]] != 0) {
                    v += step * style.halo.map_or(0.0, |b| b.1);
                }
                v += noise.sample(&mut rng);
                img[[y, x]] = v.round().clamp(0.0, 4095.0) as f32;
            }
        }
        mask.index_axis_mut(Axis(0), k).assign(&m);
    }
    SyntheticCase {
        case_id: case_id(index),
        image,
        mask,
        shapes,
        distractors,
    }
}

/// Writes `n_cases` cases of `family` under `out_dir`. Images are 16-bit,
/// masks 8-bit MetaImage.
pub fn generate_dataset(family: Family, n_cases: usize, seed: u64, out_dir: &Path) -> Result<Vec<SyntheticCase>> {
    generate_dataset_with_dims(family, n_cases, seed, out_dir, DEFAULT_DIMS)
}

pub fn generate_dataset_with_dims(
    family: Family,
    n_cases: usize,
    seed: u64,
    out_dir: &Path,
    dims: (usize, usize, usize),
) -> Result<Vec<SyntheticCase>> {
    if n_cases < MIN_CASES {
        return Err(Error::TooFewCases {
            dataset: family.to_string(),
            found: n_cases,
            required: MIN_CASES,
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    (0..n_cases)
        .map(|i| {
            let case = generate_case(family, seed, i, dims);
            write_metaimage(&out_dir.join(format!("{}.mhd", case.case_id)), &case.image, &SPACING, ElementType::Short)?;
            write_metaimage(
                &out_dir.join(format!("{}_segmentation.mhd", case.case_id)),
                &case.mask.mapv(f32::from),
                &SPACING,
                ElementType::UChar,
            )?;
            Ok(case)
        })
        .collect()
}

/// All four families, each under `root/<dataset>`. Returns the directories
/// in table order.
pub fn generate_benchmark(root: &Path, n_cases: usize, seed: u64, dims: (usize, usize, usize)) -> Result<Vec<(DatasetId, PathBuf)>> {
    DatasetId::TABLE_ORDER
        .into_iter()
        .map(|d| {
            let dir = root.join(d.as_str());
            generate_dataset_with_dims(Family::for_dataset(d), n_cases, seed, &dir, dims)?;
            Ok((d, dir))
        })
        .collect()
}

/// Mean fraction of foreground voxels over a set of cases.
pub fn foreground_fraction(cases: &[SyntheticCase]) -> f64 {
    let (fg, total) = cases.iter().fold((0usize, 0usize), |(f, t), c| {
        (f + c.mask.iter().filter(|&&v| v != 0).count(), t + c.mask.len())
    });
    fg as f64 / total.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_within_range() {
        for f in Family::ALL {
            let a = generate_case(f, 1, 0, (3, 64, 64));
            let b = generate_case(f, 1, 0, (3, 64, 64));
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
            let frac = foreground_fraction(&[a]);
            assert!(frac > FOREGROUND_RANGE.0 && frac < FOREGROUND_RANGE.1, "{f}: {frac}");
        }
    }

    #[test]
    fn too_few_cases() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            generate_dataset(Family::Circles, 4, 1, dir.path()),
            Err(Error::TooFewCases { .. })
        ));
    }

    #[test]
    fn family_names_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.as_str().parse::<Family>().unwrap(), f);
            assert_eq!(Family::for_dataset(f.dataset()), f);
        }
    }
}
