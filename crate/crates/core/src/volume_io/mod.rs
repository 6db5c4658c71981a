//! Reading the four prostate datasets into a uniform volume representation.
//!
//! * Promise12 ships MetaImage `.mhd`/`.raw` pairs ([`metaimage`]).
//! * Decathlon ships NIfTI-1 (`.nii.gz`), multi-modal in the fourth axis
//!   ([`nifti`]).
//! * NCI-ISBI 2013 and ProstateX images are DICOM series ([`dicom`]).
//!
//! Every loader produces a [`Volume`] with `f32` intensities indexed
//! `(slice, row, column)`; masks become binary [`MaskVolume`]s.

pub mod dicom;
pub mod manifest;
pub mod metaimage;
pub mod nifti;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{
    build_manifest, load_case, CaseEntry, DatasetManifest, ExcludedCase, ImageSource, Layout,
    ManifestOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Promise12,
    Prostatex,
    Isbi2013,
    Decathlon,
}

impl DatasetId {
    pub const ALL: [DatasetId; 4] = [
        DatasetId::Promise12,
        DatasetId::Prostatex,
        DatasetId::Isbi2013,
        DatasetId::Decathlon,
    ];

    /// Column/row order of the published results table.
    pub const TABLE_ORDER: [DatasetId; 4] = [
        DatasetId::Promise12,
        DatasetId::Prostatex,
        DatasetId::Decathlon,
        DatasetId::Isbi2013,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Promise12 => "promise12",
            DatasetId::Prostatex => "prostatex",
            DatasetId::Isbi2013 => "isbi2013",
            DatasetId::Decathlon => "decathlon",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            DatasetId::Promise12 => "Promise12",
            DatasetId::Prostatex => "ProstateX",
            DatasetId::Isbi2013 => "NCI-ISBI 2013",
            DatasetId::Decathlon => "Decathlon",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|d| *d == self).expect("listed")
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_', ' '], "").as_str() {
            "promise12" => Ok(DatasetId::Promise12),
            "prostatex" => Ok(DatasetId::Prostatex),
            "isbi2013" | "nciisbi2013" | "isbi" => Ok(DatasetId::Isbi2013),
            "decathlon" | "msd" => Ok(DatasetId::Decathlon),
            _ => Err(Error::InvalidArgument(format!(
                "unknown dataset `{s}` (expected promise12, prostatex, isbi2013 or decathlon)"
            ))),
        }
    }
}

/// Voxel spacing `(dx, dy, dz)` in millimetres.
pub type Spacing = [f64; 3];

fn check_geometry(dims: (usize, usize, usize), spacing: &Spacing) -> Result<()> {
    if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
        return Err(Error::Shape(format!("volume dims must be >= 1, got {dims:?}")));
    }
    if spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::Shape(format!("voxel spacing must be > 0, got {spacing:?}")));
    }
    Ok(())
}

/// A 3D scalar image. `voxels` is indexed `(depth, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub voxels: Array3<f32>,
    pub spacing: Spacing,
    pub case_id: String,
    pub dataset: DatasetId,
}

impl Volume {
    pub fn new(
        voxels: Array3<f32>,
        spacing: Spacing,
        case_id: impl Into<String>,
        dataset: DatasetId,
    ) -> Result<Self> {
        check_geometry(voxels.dim(), &spacing)?;
        Ok(Volume {
            voxels,
            spacing,
            case_id: case_id.into(),
            dataset,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }
}

/// Binary prostate mask paired with a [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    pub labels: Array3<u8>,
    pub spacing: Spacing,
    pub case_id: String,
    pub dataset: DatasetId,
}

impl MaskVolume {
    /// Rejects labels outside `{0, 1}`.
    pub fn new(
        labels: Array3<u8>,
        spacing: Spacing,
        case_id: impl Into<String>,
        dataset: DatasetId,
    ) -> Result<Self> {
        check_geometry(labels.dim(), &spacing)?;
        if labels.iter().any(|&v| v > 1) {
            return Err(Error::Shape("mask labels must be 0 or 1".into()));
        }
        Ok(MaskVolume {
            labels,
            spacing,
            case_id: case_id.into(),
            dataset,
        })
    }

    /// Collapses every nonzero label (e.g. separate zones) to foreground.
    pub fn from_label_volume(vol: &Volume) -> Self {
        MaskVolume {
            labels: vol.voxels.mapv(|v| u8::from(v != 0.0)),
            spacing: vol.spacing,
            case_id: vol.case_id.clone(),
            dataset: vol.dataset,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.labels.dim()
    }

    pub fn foreground_voxels(&self) -> usize {
        self.labels.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            voxels: self.labels.mapv(f32::from),
            spacing: self.spacing,
            case_id: self.case_id.clone(),
            dataset: self.dataset,
        }
    }
}

/// Case ID from a file name: the stem with any `.nii`/`.gz` suffixes removed.
pub fn case_id_from_path(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut stem = name.as_str();
    for suffix in [".gz", ".nii", ".mhd", ".mha", ".raw"] {
        if let Some(s) = stem.strip_suffix(suffix) {
            stem = s;
        }
    }
    stem.to_string()
}

/// Loads a mask file (MetaImage or NIfTI, chosen by extension) and binarises it.
pub fn load_mask(path: &Path, dataset: DatasetId) -> Result<MaskVolume> {
    let vol = load_volume_file(path, dataset)?;
    Ok(MaskVolume::from_label_volume(&vol))
}

/// Loads a single-file volume, dispatching on the extension.
pub fn load_volume_file(path: &Path, dataset: DatasetId) -> Result<Volume> {
    let name = path.to_string_lossy().to_ascii_lowercase();
    if name.ends_with(".mhd") || name.ends_with(".mha") {
        metaimage::load_metaimage(path, dataset)
    } else if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        nifti::load_nifti(path, dataset)
    } else {
        Err(Error::parse(
            "volume",
            "extension",
            format!("unsupported volume file {}", path.display()),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_ids_parse_and_print() {
        for d in DatasetId::ALL {
            assert_eq!(d.as_str().parse::<DatasetId>().unwrap(), d);
            assert_eq!(d.to_string(), d.as_str());
        }
        assert_eq!("NCI-ISBI 2013".parse::<DatasetId>().unwrap(), DatasetId::Isbi2013);
        assert!("brats".parse::<DatasetId>().is_err());
    }

    #[test]
    fn multi_zone_labels_collapse() {
        let vol = Volume::new(
            Array3::from_shape_vec((1, 1, 4), vec![0.0, 1.0, 2.0, 0.0]).unwrap(),
            [1.0; 3],
            "c",
            DatasetId::Decathlon,
        )
        .unwrap();
        let m = MaskVolume::from_label_volume(&vol);
        assert_eq!(m.labels.iter().copied().collect::<Vec<_>>(), vec![0, 1, 1, 0]);
    }

    #[test]
    fn geometry_invariants_enforced() {
        assert!(Volume::new(Array3::zeros((0, 2, 2)), [1.0; 3], "c", DatasetId::Promise12).is_err());
        assert!(Volume::new(Array3::zeros((1, 2, 2)), [1.0, 0.0, 1.0], "c", DatasetId::Promise12).is_err());
        assert!(MaskVolume::new(Array3::from_elem((1, 1, 1), 2), [1.0; 3], "c", DatasetId::Promise12).is_err());
    }

    #[test]
    fn case_ids_strip_extensions() {
        assert_eq!(case_id_from_path(Path::new("/a/Case00.mhd")), "Case00");
        assert_eq!(case_id_from_path(Path::new("prostate_00.nii.gz")), "prostate_00");
    }
}
