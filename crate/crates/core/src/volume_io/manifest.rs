//! Discovering image/mask pairs under a dataset root.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{dicom, load_mask, load_volume_file, nifti, DatasetId, MaskVolume, Volume};
use crate::error::{Error, Result};

/// On-disk organisation of a dataset root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// `CaseNN.mhd` + `CaseNN_segmentation.mhd`, searched recursively.
    Promise12,
    /// `imagesTr/<name>.nii.gz` + `labelsTr/<name>.nii.gz`.
    Decathlon,
    /// `images/<case>/` DICOM series + `masks/<case>.{nii,nii.gz,mhd}`.
    Isbi2013,
    /// `<case>/` DICOM series (optionally nested) + masks in a separate root.
    Prostatex,
}

impl Layout {
    pub fn default_for(dataset: DatasetId) -> Layout {
        match dataset {
            DatasetId::Promise12 => Layout::Promise12,
            DatasetId::Decathlon => Layout::Decathlon,
            DatasetId::Isbi2013 => Layout::Isbi2013,
            DatasetId::Prostatex => Layout::Prostatex,
        }
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match DatasetId::from_str(s)? {
            DatasetId::Promise12 => Layout::Promise12,
            DatasetId::Decathlon => Layout::Decathlon,
            DatasetId::Isbi2013 => Layout::Isbi2013,
            DatasetId::Prostatex => Layout::Prostatex,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImageSource {
    File { path: PathBuf, channel: usize },
    DicomSeries { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub case_id: String,
    pub image: ImageSource,
    pub mask: PathBuf,
    /// `(depth, height, width)` as read at ingest.
    pub dims: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcludedCase {
    pub case_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset: DatasetId,
    pub layout: Layout,
    pub modality: String,
    pub root: PathBuf,
    pub cases: Vec<CaseEntry>,
    pub excluded: Vec<ExcludedCase>,
}

impl DatasetManifest {
    pub fn case(&self, case_id: &str) -> Option<&CaseEntry> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ManifestOptions {
    /// Overrides the dataset's default layout.
    pub layout: Option<Layout>,
    /// Mask directory for layouts that ship masks separately.
    pub mask_root: Option<PathBuf>,
    /// Channel of multi-modal NIfTI images (0 = T2-weighted).
    pub channel: usize,
}

/// Scans `root` and pairs images with masks. Cases that lack a mask or fail
/// to load are listed in `excluded` rather than aborting the scan.
pub fn build_manifest(root: &Path, dataset: DatasetId, opts: &ManifestOptions) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let layout = opts.layout.unwrap_or(Layout::default_for(dataset));
    let candidates = match layout {
        Layout::Promise12 => scan_promise12(root)?,
        Layout::Decathlon => scan_decathlon(root, opts.channel)?,
        Layout::Isbi2013 => scan_isbi(root, opts.mask_root.as_deref())?,
        Layout::Prostatex => scan_prostatex(root, opts.mask_root.as_deref())?,
    };
    if candidates.is_empty() {
        return Err(Error::NoCases(root.to_path_buf()));
    }

    let mut cases = Vec::new();
    let mut excluded = Vec::new();
    for (case_id, image, mask) in candidates {
        let Some(mask) = mask else {
            excluded.push(ExcludedCase {
                case_id,
                reason: "no matching mask".into(),
            });
            continue;
        };
        let mut entry = CaseEntry {
            case_id: case_id.clone(),
            image,
            mask,
            dims: [0; 3],
        };
        match load_case(&entry, dataset) {
            Ok((vol, _)) => {
                let (d, h, w) = vol.dims();
                entry.dims = [d, h, w];
                cases.push(entry);
            }
            Err(e) => excluded.push(ExcludedCase {
                case_id,
                reason: e.to_string(),
            }),
        }
    }
    cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    excluded.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    if cases.is_empty() {
        return Err(Error::NoCases(root.to_path_buf()));
    }
    Ok(DatasetManifest {
        dataset,
        layout,
        modality: "T2W".into(),
        root: root.to_path_buf(),
        cases,
        excluded,
    })
}

/// Loads the image and binarised mask of one manifest entry.
pub fn load_case(entry: &CaseEntry, dataset: DatasetId) -> Result<(Volume, MaskVolume)> {
    let mut vol = match &entry.image {
        ImageSource::File { path, channel } => {
            let name = path.to_string_lossy().to_ascii_lowercase();
            if name.ends_with(".nii") || name.ends_with(".nii.gz") {
                nifti::load_nifti_channel(path, dataset, *channel)?
            } else {
                load_volume_file(path, dataset)?
            }
        }
        ImageSource::DicomSeries { dir } => dicom::load_dicom_series(dir, dataset)?,
    };
    vol.case_id = entry.case_id.clone();
    let mut mask = load_mask(&entry.mask, dataset)?;
    if mask.dims() != vol.dims() {
        return Err(Error::Shape(format!(
            "case {}: mask dims {:?} differ from image dims {:?}",
            entry.case_id,
            mask.dims(),
            vol.dims()
        )));
    }
    mask.case_id = entry.case_id.clone();
    mask.spacing = vol.spacing;
    Ok((vol, mask))
}

type Candidate = (String, ImageSource, Option<PathBuf>);

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            !p.file_name()
                .map(|n| n.to_string_lossy().starts_with('.'))
                .unwrap_or(true)
        })
        .collect();
    out.sort();
    Ok(out)
}

fn walk_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for p in sorted_entries(dir)? {
        if p.is_dir() {
            walk_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn scan_promise12(root: &Path) -> Result<Vec<Candidate>> {
    let mut files = Vec::new();
    walk_files(root, &mut files)?;
    let mut out = Vec::new();
    for f in &files {
        let name = file_name(f);
        let Some(stem) = name.strip_suffix(".mhd") else {
            continue;
        };
        if stem.ends_with("_segmentation") {
            continue;
        }
        let mask = f.with_file_name(format!("{stem}_segmentation.mhd"));
        out.push((
            stem.to_string(),
            ImageSource::File {
                path: f.clone(),
                channel: 0,
            },
            mask.is_file().then_some(mask),
        ));
    }
    Ok(out)
}

fn nifti_stem(name: &str) -> Option<&str> {
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))
}

fn scan_decathlon(root: &Path, channel: usize) -> Result<Vec<Candidate>> {
    let images = root.join("imagesTr");
    let labels = root.join("labelsTr");
    if !images.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for f in sorted_entries(&images)? {
        let name = file_name(&f);
        let Some(stem) = nifti_stem(&name) else {
            continue;
        };
        let mask = labels.join(&name);
        out.push((
            stem.to_string(),
            ImageSource::File { path: f, channel },
            mask.is_file().then_some(mask),
        ));
    }
    Ok(out)
}

fn find_mask(mask_root: &Path, case_id: &str) -> Option<PathBuf> {
    [".nii.gz", ".nii", ".mhd"]
        .iter()
        .map(|ext| mask_root.join(format!("{case_id}{ext}")))
        .find(|p| p.is_file())
}

fn has_files(dir: &Path) -> bool {
    fs::read_dir(dir)
        .map(|it| it.filter_map(|e| e.ok()).any(|e| e.path().is_file()))
        .unwrap_or(false)
}

/// The slice directory of a case: the case directory itself when it holds
/// files, otherwise the first nested directory whose name mentions T2,
/// otherwise the first nested directory holding files.
fn series_dir(case_dir: &Path) -> Result<Option<PathBuf>> {
    if has_files(case_dir) {
        return Ok(Some(case_dir.to_path_buf()));
    }
    let mut dirs = Vec::new();
    collect_dirs(case_dir, &mut dirs)?;
    let with_files: Vec<_> = dirs.into_iter().filter(|d| has_files(d)).collect();
    let t2 = with_files
        .iter()
        .find(|d| file_name(d).to_ascii_lowercase().contains("t2"));
    Ok(t2.or(with_files.first()).cloned())
}

fn collect_dirs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for p in sorted_entries(dir)? {
        if p.is_dir() {
            out.push(p.clone());
            collect_dirs(&p, out)?;
        }
    }
    Ok(())
}

fn scan_series_cases(images: &Path, mask_root: &Path) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for case_dir in sorted_entries(images)? {
        if !case_dir.is_dir() || case_dir == mask_root {
            continue;
        }
        let case_id = file_name(&case_dir);
        let Some(dir) = series_dir(&case_dir)? else {
            continue;
        };
        out.push((
            case_id.clone(),
            ImageSource::DicomSeries { dir },
            find_mask(mask_root, &case_id),
        ));
    }
    Ok(out)
}

fn scan_isbi(root: &Path, mask_root: Option<&Path>) -> Result<Vec<Candidate>> {
    let images = root.join("images");
    if !images.is_dir() {
        return Ok(Vec::new());
    }
    let masks = mask_root.map(Path::to_path_buf).unwrap_or_else(|| root.join("masks"));
    scan_series_cases(&images, &masks)
}

fn scan_prostatex(root: &Path, mask_root: Option<&Path>) -> Result<Vec<Candidate>> {
    let masks = mask_root.map(Path::to_path_buf).unwrap_or_else(|| root.join("masks"));
    scan_series_cases(root, &masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::metaimage::{write_metaimage, ElementType};
    use ndarray::Array3;
    use tempfile::tempdir;

    fn write_pair(dir: &Path, case: &str, with_mask: bool) {
        let img = Array3::from_elem((2, 4, 4), 3.0f32);
        write_metaimage(&dir.join(format!("{case}.mhd")), &img, &[1.0, 1.0, 2.0], ElementType::Short).unwrap();
        if with_mask {
            let mut m = Array3::zeros((2, 4, 4));
            m[[0, 1, 1]] = 1.0f32;
            write_metaimage(
                &dir.join(format!("{case}_segmentation.mhd")),
                &m,
                &[1.0, 1.0, 2.0],
                ElementType::UChar,
            )
            .unwrap();
        }
    }

    #[test]
    fn promise12_single_case() {
        let dir = tempdir().unwrap();
        write_pair(dir.path(), "Case00", true);
        let m = build_manifest(dir.path(), DatasetId::Promise12, &ManifestOptions::default()).unwrap();
        assert_eq!(m.cases.len(), 1);
        assert_eq!(m.cases[0].case_id, "Case00");
        assert_eq!(m.cases[0].dims, [2, 4, 4]);
        let (vol, mask) = load_case(&m.cases[0], DatasetId::Promise12).unwrap();
        assert_eq!(vol.dims(), mask.dims());
        assert_eq!(mask.foreground_voxels(), 1);
    }

    #[test]
    fn unpaired_image_is_excluded() {
        let dir = tempdir().unwrap();
        write_pair(dir.path(), "Case00", true);
        write_pair(dir.path(), "Case01", false);
        let m = build_manifest(dir.path(), DatasetId::Promise12, &ManifestOptions::default()).unwrap();
        assert_eq!(m.cases.len(), 1);
        assert_eq!(m.excluded.len(), 1);
        assert_eq!(m.excluded[0].case_id, "Case01");
    }

    #[test]
    fn empty_root_has_no_cases() {
        let dir = tempdir().unwrap();
        let err = build_manifest(dir.path(), DatasetId::Promise12, &ManifestOptions::default()).unwrap_err();
        assert!(err.to_string().contains("no cases found"), "{err}");
    }

    #[test]
    fn builds_are_deterministic_and_serialise() {
        let dir = tempdir().unwrap();
        for c in ["Case02", "Case00", "Case01"] {
            write_pair(dir.path(), c, true);
        }
        let a = build_manifest(dir.path(), DatasetId::Promise12, &ManifestOptions::default()).unwrap();
        let b = build_manifest(dir.path(), DatasetId::Promise12, &ManifestOptions::default()).unwrap();
        assert_eq!(a, b);
        let ids: Vec<_> = a.cases.iter().map(|c| c.case_id.as_str()).collect();
        assert_eq!(ids, ["Case00", "Case01", "Case02"]);
        let p = dir.path().join("m.json");
        a.save(&p).unwrap();
        assert_eq!(DatasetManifest::load(&p).unwrap(), a);
    }
}
