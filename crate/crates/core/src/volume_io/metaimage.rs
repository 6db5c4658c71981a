//! MetaImage (`.mhd` header + raw data file, or single-file `.mha`).

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::ZlibDecoder;
use ndarray::Array3;

use super::{case_id_from_path, DatasetId, Spacing, Volume};
use crate::error::{Error, Result};

const FORMAT: &str = "MetaImage";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    Char,
    UChar,
    Short,
    UShort,
    Int,
    UInt,
    Float,
    Double,
}

impl ElementType {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "MET_CHAR" => ElementType::Char,
            "MET_UCHAR" => ElementType::UChar,
            "MET_SHORT" => ElementType::Short,
            "MET_USHORT" => ElementType::UShort,
            "MET_INT" | "MET_LONG" => ElementType::Int,
            "MET_UINT" | "MET_ULONG" => ElementType::UInt,
            "MET_FLOAT" => ElementType::Float,
            "MET_DOUBLE" => ElementType::Double,
            _ => return None,
        })
    }

    pub fn tag(self) -> &'static str {
        match self {
            ElementType::Char => "MET_CHAR",
            ElementType::UChar => "MET_UCHAR",
            ElementType::Short => "MET_SHORT",
            ElementType::UShort => "MET_USHORT",
            ElementType::Int => "MET_INT",
            ElementType::UInt => "MET_UINT",
            ElementType::Float => "MET_FLOAT",
            ElementType::Double => "MET_DOUBLE",
        }
    }

    pub fn size(self) -> usize {
        match self {
            ElementType::Char | ElementType::UChar => 1,
            ElementType::Short | ElementType::UShort => 2,
            ElementType::Int | ElementType::UInt | ElementType::Float => 4,
            ElementType::Double => 8,
        }
    }
}

/// Decodes `count` elements; numeric conversion to `f32` follows `as`.
pub(crate) fn decode_elements<B: ByteOrder>(bytes: &[u8], ty: ElementType) -> Vec<f32> {
    match ty {
        ElementType::Char => bytes.iter().map(|&b| b as i8 as f32).collect(),
        ElementType::UChar => bytes.iter().map(|&b| b as f32).collect(),
        ElementType::Short => bytes.chunks_exact(2).map(|c| B::read_i16(c) as f32).collect(),
        ElementType::UShort => bytes.chunks_exact(2).map(|c| B::read_u16(c) as f32).collect(),
        ElementType::Int => bytes.chunks_exact(4).map(|c| B::read_i32(c) as f32).collect(),
        ElementType::UInt => bytes.chunks_exact(4).map(|c| B::read_u32(c) as f32).collect(),
        ElementType::Float => bytes.chunks_exact(4).map(B::read_f32).collect(),
        ElementType::Double => bytes.chunks_exact(8).map(|c| B::read_f64(c) as f32).collect(),
    }
}

fn encode_elements(values: &[f32], ty: ElementType) -> Vec<u8> {
    let mut out = vec![0u8; values.len() * ty.size()];
    for (v, chunk) in values.iter().zip(out.chunks_exact_mut(ty.size())) {
        let r = v.round();
        match ty {
            ElementType::Char => chunk[0] = r as i8 as u8,
            ElementType::UChar => chunk[0] = r as u8,
            ElementType::Short => LittleEndian::write_i16(chunk, r as i16),
            ElementType::UShort => LittleEndian::write_u16(chunk, r as u16),
            ElementType::Int => LittleEndian::write_i32(chunk, r as i32),
            ElementType::UInt => LittleEndian::write_u32(chunk, r as u32),
            ElementType::Float => LittleEndian::write_f32(chunk, *v),
            ElementType::Double => LittleEndian::write_f64(chunk, *v as f64),
        }
    }
    out
}

#[derive(Debug)]
struct Header {
    fields: HashMap<String, String>,
    /// Byte offset of the pixel data when the data file is `LOCAL`.
    local_data_offset: usize,
}

impl Header {
    fn get(&self, key: &str) -> Option<&str> {
        self.fields.get(&key.to_ascii_lowercase()).map(String::as_str)
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::parse(FORMAT, key, "required field missing"))
    }

    fn numbers<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.require(key)?
            .split_whitespace()
            .map(|t| {
                t.parse::<T>()
                    .map_err(|_| Error::parse(FORMAT, key, format!("not a number: `{t}`")))
            })
            .collect()
    }

    fn flag(&self, key: &str) -> bool {
        self.get(key)
            .map(|v| v.eq_ignore_ascii_case("true") || v == "1")
            .unwrap_or(false)
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut fields = HashMap::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|e| pos + e + 1)
            .unwrap_or(bytes.len());
        let line = String::from_utf8_lossy(&bytes[pos..end]);
        pos = end;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::parse(FORMAT, line, "expected `Key = Value`"));
        };
        let key = key.trim().to_ascii_lowercase();
        let is_data_file = key == "elementdatafile";
        fields.insert(key, value.trim().to_string());
        // ElementDataFile always terminates the header.
        if is_data_file {
            break;
        }
    }
    if !fields.contains_key("elementdatafile") {
        return Err(Error::parse(FORMAT, "ElementDataFile", "required field missing"));
    }
    Ok(Header {
        fields,
        local_data_offset: pos,
    })
}

/// Reads a MetaImage volume. `ElementSpacing` (or `ElementSize`) gives
/// `(dx, dy, dz)`; `DimSize` is listed fastest axis first, so
/// `DimSize = 4 4 2` becomes dims `(2, 4, 4)`.
pub fn load_metaimage(header_path: &Path, dataset: DatasetId) -> Result<Volume> {
    let bytes = fs::read(header_path).map_err(|e| Error::io(header_path, e))?;
    let header = parse_header(&bytes)?;

    let ndims: usize = header.numbers("NDims")?.first().copied().unwrap_or(0);
    if !(2..=3).contains(&ndims) {
        return Err(Error::parse(FORMAT, "NDims", format!("unsupported dimensionality {ndims}")));
    }
    if let Some(ch) = header.get("ElementNumberOfChannels") {
        if ch.trim() != "1" {
            return Err(Error::parse(
                FORMAT,
                "ElementNumberOfChannels",
                format!("only single-channel images are supported, got {ch}"),
            ));
        }
    }
    let dim_size: Vec<usize> = header.numbers("DimSize")?;
    if dim_size.len() != ndims || dim_size.contains(&0) {
        return Err(Error::parse(
            FORMAT,
            "DimSize",
            format!("expected {ndims} positive sizes, got {dim_size:?}"),
        ));
    }
    let spacing_key = if header.get("ElementSpacing").is_some() {
        "ElementSpacing"
    } else {
        "ElementSize"
    };
    let mut spacing: Vec<f64> = match header.get(spacing_key) {
        Some(_) => header.numbers(spacing_key)?,
        None => vec![1.0; ndims],
    };
    if spacing.len() != ndims || spacing.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::parse(
            FORMAT,
            spacing_key,
            format!("expected {ndims} positive spacings, got {spacing:?}"),
        ));
    }
    let (w, h, d) = (dim_size[0], dim_size[1], dim_size.get(2).copied().unwrap_or(1));
    if ndims == 2 {
        spacing.push(1.0);
    }

    let ty_name = header.require("ElementType")?;
    let ty = ElementType::parse(ty_name).ok_or_else(|| {
        Error::parse(FORMAT, "ElementType", format!("unsupported element type `{ty_name}`"))
    })?;
    let big_endian = header.flag("ElementByteOrderMSB") || header.flag("BinaryDataByteOrderMSB");

    let data_file = header.require("ElementDataFile")?;
    let (mut raw, raw_path) = if data_file.eq_ignore_ascii_case("LOCAL") {
        (bytes[header.local_data_offset..].to_vec(), header_path.to_path_buf())
    } else {
        let path = header_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(data_file);
        let raw = fs::read(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::parse(
                    FORMAT,
                    "ElementDataFile",
                    format!("raw data file {} not found", path.display()),
                )
            } else {
                Error::io(&path, e)
            }
        })?;
        (raw, path)
    };

    if let Some(skip) = header.get("HeaderSize") {
        let skip: i64 = skip
            .parse()
            .map_err(|_| Error::parse(FORMAT, "HeaderSize", format!("not a number: `{skip}`")))?;
        let expected = w * h * d * ty.size();
        let start = if skip < 0 {
            raw.len().saturating_sub(expected)
        } else {
            skip as usize
        };
        raw = raw.get(start..).unwrap_or_default().to_vec();
    }

    if header.flag("CompressedData") {
        let mut out = Vec::new();
        ZlibDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::parse(FORMAT, "CompressedData", format!("zlib stream: {e}")))?;
        raw = out;
    }

    let expected = w * h * d * ty.size();
    if raw.len() != expected {
        return Err(Error::parse(
            FORMAT,
            "ElementDataFile",
            format!(
                "raw size mismatch: DimSize x {} needs {expected} bytes, {} holds {}",
                ty.tag(),
                raw_path.display(),
                raw.len()
            ),
        ));
    }
    let values = if big_endian {
        decode_elements::<BigEndian>(&raw, ty)
    } else {
        decode_elements::<LittleEndian>(&raw, ty)
    };
    let voxels = Array3::from_shape_vec((d, h, w), values).expect("length checked above");
    Volume::new(
        voxels,
        [spacing[0], spacing[1], spacing[2]],
        case_id_from_path(header_path),
        dataset,
    )
}

/// Writes `<stem>.mhd` + `<stem>.raw`. Integer element types round the
/// voxel values. Returns the path of the raw file.
pub fn write_metaimage(
    header_path: &Path,
    voxels: &Array3<f32>,
    spacing: &Spacing,
    ty: ElementType,
) -> Result<PathBuf> {
    let (d, h, w) = voxels.dim();
    let raw_name = format!(
        "{}.raw",
        header_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into())
    );
    let raw_path = header_path.with_file_name(&raw_name);
    let header = format!(
        "ObjectType = Image\n\
         NDims = 3\n\
         BinaryData = True\n\
         BinaryDataByteOrderMSB = False\n\
         CompressedData = False\n\
         DimSize = {w} {h} {d}\n\
         ElementSpacing = {} {} {}\n\
         ElementType = {}\n\
         ElementDataFile = {raw_name}\n",
        spacing[0],
        spacing[1],
        spacing[2],
        ty.tag()
    );
    let values: Vec<f32> = voxels.iter().copied().collect();
    let mut f = fs::File::create(header_path).map_err(|e| Error::io(header_path, e))?;
    f.write_all(header.as_bytes())
        .map_err(|e| Error::io(header_path, e))?;
    fs::write(&raw_path, encode_elements(&values, ty)).map_err(|e| Error::io(&raw_path, e))?;
    Ok(raw_path)
}

pub fn write_volume(header_path: &Path, vol: &Volume) -> Result<PathBuf> {
    write_metaimage(header_path, &vol.voxels, &vol.spacing, ElementType::Float)
}
