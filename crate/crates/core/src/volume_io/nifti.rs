//! NIfTI-1 single-file volumes (`.nii`, optionally gzip-compressed).
//!
//! Only the fields needed to recover voxel data and spacing are decoded:
//! `dim`, `datatype`, `pixdim`, `vox_offset` and the intensity scaling pair.
//! Multi-modal 4D files store one channel per index of the fourth axis.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array3;

use super::metaimage::{decode_elements, ElementType};
use super::{case_id_from_path, DatasetId, Volume};
use crate::error::{Error, Result};

const FORMAT: &str = "NIfTI-1";
const HEADER_SIZE: usize = 348;
const MAGIC_OFFSET: usize = 344;

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub big_endian: bool,
}

impl NiftiHeader {
    fn element_type(&self) -> Result<ElementType> {
        Ok(match self.datatype {
            2 => ElementType::UChar,
            4 => ElementType::Short,
            8 => ElementType::Int,
            16 => ElementType::Float,
            64 => ElementType::Double,
            256 => ElementType::Char,
            512 => ElementType::UShort,
            768 => ElementType::UInt,
            other => {
                return Err(Error::parse(
                    FORMAT,
                    "datatype",
                    format!("unsupported datatype code {other}"),
                ))
            }
        })
    }

    /// `(x, y, z, channels)` extents.
    fn extents(&self) -> Result<(usize, usize, usize, usize)> {
        let ndim = self.dim[0];
        if !(1..=7).contains(&ndim) {
            return Err(Error::parse(FORMAT, "dim[0]", format!("invalid rank {ndim}")));
        }
        let axis = |i: usize| -> Result<usize> {
            if i as i16 > ndim {
                return Ok(1);
            }
            let v = self.dim[i];
            if v < 1 {
                return Err(Error::parse(FORMAT, format!("dim[{i}]"), format!("extent {v} < 1")));
            }
            Ok(v as usize)
        };
        for i in 5..=7 {
            if axis(i)? != 1 {
                return Err(Error::parse(FORMAT, format!("dim[{i}]"), "rank above 4 is not supported"));
            }
        }
        Ok((axis(1)?, axis(2)?, axis(3)?, axis(4)?))
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::parse(FORMAT, "gzip", format!("truncated or corrupt stream: {e}")))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::parse(
            FORMAT,
            "header",
            format!("truncated stream: {} bytes, header needs {HEADER_SIZE}", bytes.len()),
        ));
    }
    if &bytes[MAGIC_OFFSET..MAGIC_OFFSET + 4] != b"n+1\0" {
        return Err(Error::parse(FORMAT, "magic", "bad magic (expected single-file `n+1`)"));
    }
    let big_endian = if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        false
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        true
    } else {
        return Err(Error::parse(FORMAT, "sizeof_hdr", "bad magic: header size is not 348"));
    };
    fn fields<B: ByteOrder>(b: &[u8], big_endian: bool) -> NiftiHeader {
        let mut dim = [0i16; 8];
        B::read_i16_into(&b[40..56], &mut dim);
        let mut pixdim = [0f32; 8];
        B::read_f32_into(&b[76..108], &mut pixdim);
        NiftiHeader {
            dim,
            datatype: B::read_i16(&b[70..72]),
            pixdim,
            vox_offset: B::read_f32(&b[108..112]),
            scl_slope: B::read_f32(&b[112..116]),
            scl_inter: B::read_f32(&b[116..120]),
            big_endian,
        }
    }
    Ok(if big_endian {
        fields::<BigEndian>(bytes, true)
    } else {
        fields::<LittleEndian>(bytes, false)
    })
}

/// Loads every channel of a (possibly 4D) NIfTI file.
pub fn load_nifti_channels(path: &Path, dataset: DatasetId) -> Result<Vec<Volume>> {
    let bytes = read_all(path)?;
    let hdr = parse_header(&bytes)?;
    let ty = hdr.element_type()?;
    let (nx, ny, nz, nc) = hdr.extents()?;
    let offset = (hdr.vox_offset.max(HEADER_SIZE as f32 + 4.0)) as usize;
    let per_channel = nx * ny * nz;
    let needed = per_channel * nc * ty.size();
    let data = bytes.get(offset..).unwrap_or_default();
    if data.len() < needed {
        return Err(Error::parse(
            FORMAT,
            "voxel data",
            format!("truncated stream: need {needed} bytes after offset {offset}, have {}", data.len()),
        ));
    }
    let mut values = if hdr.big_endian {
        decode_elements::<BigEndian>(&data[..needed], ty)
    } else {
        decode_elements::<LittleEndian>(&data[..needed], ty)
    };
    let (slope, inter) = (hdr.scl_slope, hdr.scl_inter);
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }
    let spacing = [1, 2, 3].map(|i| {
        let s = hdr.pixdim[i].abs() as f64;
        if s > 0.0 && s.is_finite() {
            s
        } else {
            1.0
        }
    });
    let case_id = case_id_from_path(path);
    values
        .chunks_exact(per_channel)
        .map(|chunk| {
            let voxels = Array3::from_shape_vec((nz, ny, nx), chunk.to_vec()).expect("sized");
            Volume::new(voxels, spacing, case_id.clone(), dataset)
        })
        .collect()
}

pub fn load_nifti_channel(path: &Path, dataset: DatasetId, channel: usize) -> Result<Volume> {
    let mut channels = load_nifti_channels(path, dataset)?;
    if channel >= channels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} has {} channel(s), requested channel {channel}",
            path.display(),
            channels.len()
        )));
    }
    Ok(channels.swap_remove(channel))
}

/// Loads channel 0 (T2-weighted for the Decathlon prostate task).
pub fn load_nifti(path: &Path, dataset: DatasetId) -> Result<Volume> {
    load_nifti_channel(path, dataset, 0)
}

/// Writes `channels` (all with equal dims) as a little-endian float32
/// NIfTI-1 file; gzip-compressed when the path ends in `.gz`.
pub fn write_nifti_channels(path: &Path, channels: &[&Volume]) -> Result<()> {
    let first = channels
        .first()
        .ok_or_else(|| Error::InvalidArgument("no channels to write".into()))?;
    let (nz, ny, nx) = first.dims();
    if channels.iter().any(|c| c.dims() != first.dims()) {
        return Err(Error::Shape("all channels must share dims".into()));
    }
    let mut hdr = vec![0u8; HEADER_SIZE + 4];
    LittleEndian::write_i32(&mut hdr[0..4], HEADER_SIZE as i32);
    let nc = channels.len();
    let rank = if nc > 1 { 4 } else { 3 };
    let dim: [i16; 8] = [rank, nx as i16, ny as i16, nz as i16, nc as i16, 1, 1, 1];
    LittleEndian::write_i16_into(&dim, &mut hdr[40..56]);
    LittleEndian::write_i16(&mut hdr[70..72], 16);
    LittleEndian::write_i16(&mut hdr[72..74], 32);
    let s = first.spacing;
    let pixdim: [f32; 8] = [1.0, s[0] as f32, s[1] as f32, s[2] as f32, 1.0, 1.0, 1.0, 1.0];
    LittleEndian::write_f32_into(&pixdim, &mut hdr[76..108]);
    LittleEndian::write_f32(&mut hdr[108..112], (HEADER_SIZE + 4) as f32);
    LittleEndian::write_f32(&mut hdr[112..116], 1.0);
    // xyzt_units: millimetres.
    hdr[123] = 2;
    hdr[MAGIC_OFFSET..MAGIC_OFFSET + 4].copy_from_slice(b"n+1\0");

    let mut body = hdr;
    for c in channels {
        let start = body.len();
        body.resize(start + c.voxels.len() * 4, 0);
        for (v, chunk) in c.voxels.iter().zip(body[start..].chunks_exact_mut(4)) {
            LittleEndian::write_f32(chunk, *v);
        }
    }
    let is_gz = path.to_string_lossy().to_ascii_lowercase().ends_with(".gz");
    let out = if is_gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&body).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        body
    };
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_nifti(path: &Path, vol: &Volume) -> Result<()> {
    write_nifti_channels(path, &[vol])
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn ones() -> Volume {
        Volume::new(Array3::from_elem((3, 3, 3), 1.0), [1.0; 3], "ones", DatasetId::Decathlon).unwrap()
    }

    #[test]
    fn all_ones_roundtrip_plain_and_gzip() {
        let dir = tempdir().unwrap();
        for name in ["ones.nii", "ones.nii.gz"] {
            let p = dir.path().join(name);
            write_nifti(&p, &ones()).unwrap();
            let v = load_nifti(&p, DatasetId::Decathlon).unwrap();
            assert_eq!(v.dims(), (3, 3, 3));
            assert!(v.voxels.iter().all(|&x| x == 1.0));
            assert_eq!(v.spacing, [1.0; 3]);
            assert_eq!(v.case_id, "ones");
        }
    }

    #[test]
    fn random_bytes_are_bad_magic() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("junk.nii");
        let junk: Vec<u8> = (0..400u32).map(|i| (i.wrapping_mul(2654435761) >> 13) as u8).collect();
        fs::write(&p, junk).unwrap();
        let err = load_nifti(&p, DatasetId::Decathlon).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_files() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.nii");
        write_nifti(&p, &ones()).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(load_nifti(&p, DatasetId::Decathlon).unwrap_err().to_string().contains("truncated"));
        fs::write(&p, &bytes[..100]).unwrap();
        assert!(load_nifti(&p, DatasetId::Decathlon).unwrap_err().to_string().contains("truncated"));

        let gz = dir.path().join("t.nii.gz");
        write_nifti(&gz, &ones()).unwrap();
        let bytes = fs::read(&gz).unwrap();
        fs::write(&gz, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_nifti(&gz, DatasetId::Decathlon).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn unsupported_datatype() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("dt.nii");
        write_nifti(&p, &ones()).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        LittleEndian::write_i16(&mut bytes[70..72], 2048);
        fs::write(&p, bytes).unwrap();
        let err = load_nifti(&p, DatasetId::Decathlon).unwrap_err();
        assert!(err.to_string().contains("datatype"), "{err}");
    }

    #[test]
    fn four_d_channel_selection() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("mm.nii.gz");
        let t2 = ones();
        let mut adc = ones();
        adc.voxels.fill(5.0);
        write_nifti_channels(&p, &[&t2, &adc]).unwrap();
        assert_eq!(load_nifti(&p, DatasetId::Decathlon).unwrap().voxels, t2.voxels);
        assert_eq!(load_nifti_channel(&p, DatasetId::Decathlon, 1).unwrap().voxels, adc.voxels);
        assert!(load_nifti_channel(&p, DatasetId::Decathlon, 2).is_err());
        assert_eq!(load_nifti_channels(&p, DatasetId::Decathlon).unwrap().len(), 2);
    }

    #[test]
    fn scaling_and_big_endian() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("be.nii");
        let mut hdr = vec![0u8; 352];
        BigEndian::write_i32(&mut hdr[0..4], 348);
        BigEndian::write_i16_into(&[3, 2, 1, 1, 1, 1, 1, 1], &mut hdr[40..56]);
        BigEndian::write_i16(&mut hdr[70..72], 4);
        BigEndian::write_f32_into(&[1.0, 0.8, 0.8, 2.5, 0.0, 0.0, 0.0, 0.0], &mut hdr[76..108]);
        BigEndian::write_f32(&mut hdr[108..112], 352.0);
        BigEndian::write_f32(&mut hdr[112..116], 2.0);
        BigEndian::write_f32(&mut hdr[116..120], 1.0);
        hdr[344..348].copy_from_slice(b"n+1\0");
        hdr.extend_from_slice(&[0x00, 0x03, 0xff, 0xff]);
        fs::write(&p, hdr).unwrap();
        let v = load_nifti(&p, DatasetId::Decathlon).unwrap();
        assert_eq!(v.voxels.iter().copied().collect::<Vec<_>>(), vec![7.0, -1.0]);
        assert!((v.spacing[2] - 2.5).abs() < 1e-6);
    }
}
