//! Minimal DICOM part-10 reader for single-frame MR slice series.
//!
//! Handles uncompressed little-endian transfer syntaxes (explicit and
//! implicit VR). Sequences are skipped; only the attributes needed to stack
//! slices into a volume are decoded. A matching writer produces fixtures.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use ndarray::Array3;

use super::{DatasetId, Spacing, Volume};
use crate::error::{Error, Result};

const FORMAT: &str = "DICOM";

const IMPLICIT_LE: &str = "1.2.840.10008.1.2";
const EXPLICIT_LE: &str = "1.2.840.10008.1.2.1";

type Tag = (u16, u16);

const TRANSFER_SYNTAX: Tag = (0x0002, 0x0010);
const SERIES_UID: Tag = (0x0020, 0x000E);
const INSTANCE_NUMBER: Tag = (0x0020, 0x0013);
const IMAGE_POSITION: Tag = (0x0020, 0x0032);
const IMAGE_ORIENTATION: Tag = (0x0020, 0x0037);
const SLICE_THICKNESS: Tag = (0x0018, 0x0050);
const SLICE_SPACING: Tag = (0x0018, 0x0088);
const SAMPLES_PER_PIXEL: Tag = (0x0028, 0x0002);
const ROWS: Tag = (0x0028, 0x0010);
const COLUMNS: Tag = (0x0028, 0x0011);
const PIXEL_SPACING: Tag = (0x0028, 0x0030);
const BITS_ALLOCATED: Tag = (0x0028, 0x0100);
const PIXEL_REPRESENTATION: Tag = (0x0028, 0x0103);
const RESCALE_INTERCEPT: Tag = (0x0028, 0x1052);
const RESCALE_SLOPE: Tag = (0x0028, 0x1053);
const FLOAT_PIXEL_DATA: Tag = (0x7FE0, 0x0008);
const PIXEL_DATA: Tag = (0x7FE0, 0x0010);

const ITEM: Tag = (0xFFFE, 0xE000);
const ITEM_END: Tag = (0xFFFE, 0xE00D);
const SEQUENCE_END: Tag = (0xFFFE, 0xE0DD);
const UNDEFINED: u32 = 0xFFFF_FFFF;

/// Raw element values of the tags of interest, keyed by tag.
type Elements = HashMap<Tag, Vec<u8>>;

fn wanted(tag: Tag) -> bool {
    matches!(tag.0, 0x0002 | 0x0018 | 0x0020 | 0x0028 | 0x7FE0)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    explicit: bool,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::parse(FORMAT, what, "truncated element")),
        }
    }

    fn tag(&mut self) -> Result<Tag> {
        let b = self.take(4, "tag")?;
        Ok((LittleEndian::read_u16(&b[0..2]), LittleEndian::read_u16(&b[2..4])))
    }

    /// Reads one element header; returns `(tag, vr, length)`.
    fn header(&mut self) -> Result<(Tag, [u8; 2], u32)> {
        let tag = self.tag()?;
        if tag.0 == 0xFFFE {
            let len = LittleEndian::read_u32(self.take(4, "item length")?);
            return Ok((tag, *b"  ", len));
        }
        if !self.explicit {
            let len = LittleEndian::read_u32(self.take(4, "length")?);
            return Ok((tag, *b"UN", len));
        }
        let vr_bytes = self.take(2, "VR")?;
        let vr = [vr_bytes[0], vr_bytes[1]];
        let long = matches!(
            &vr,
            b"OB" | b"OW" | b"OF" | b"OD" | b"OL" | b"OV" | b"SQ" | b"UT" | b"UN" | b"UC" | b"UR" | b"SV" | b"UV"
        );
        let len = if long {
            self.take(2, "reserved")?;
            LittleEndian::read_u32(self.take(4, "length")?)
        } else {
            LittleEndian::read_u16(self.take(2, "length")?) as u32
        };
        Ok((tag, vr, len))
    }

    /// Skips a sequence (or encapsulated data) of undefined length.
    fn skip_undefined(&mut self) -> Result<()> {
        loop {
            let (tag, _, len) = self.header()?;
            match tag {
                SEQUENCE_END => return Ok(()),
                ITEM if len == UNDEFINED => self.skip_item_body()?,
                _ if len == UNDEFINED => self.skip_undefined()?,
                _ => {
                    self.take(len as usize, "item")?;
                }
            }
        }
    }

    fn skip_item_body(&mut self) -> Result<()> {
        loop {
            let (tag, _, len) = self.header()?;
            if tag == ITEM_END {
                return Ok(());
            }
            if len == UNDEFINED {
                self.skip_undefined()?;
            } else {
                self.take(len as usize, "nested element")?;
            }
        }
    }

    fn read_dataset(&mut self, out: &mut Elements, stop_after_meta: bool) -> Result<()> {
        while self.pos < self.buf.len() {
            if stop_after_meta {
                let next = self.buf.get(self.pos..self.pos + 2).map(LittleEndian::read_u16);
                if next != Some(0x0002) {
                    return Ok(());
                }
            }
            let (tag, _, len) = self.header()?;
            if len == UNDEFINED {
                if tag == PIXEL_DATA {
                    return Err(Error::parse(FORMAT, "PixelData", "encapsulated (compressed) pixel data is not supported"));
                }
                self.skip_undefined()?;
                continue;
            }
            let value = self.take(len as usize, &format!("({:04X},{:04X})", tag.0, tag.1))?;
            if wanted(tag) {
                out.insert(tag, value.to_vec());
            }
        }
        Ok(())
    }
}

fn text(el: &Elements, tag: Tag) -> Option<String> {
    el.get(&tag).map(|b| {
        String::from_utf8_lossy(b)
            .trim_matches(|c: char| c == '\0' || c.is_whitespace())
            .to_string()
    })
}

fn decimals(el: &Elements, tag: Tag, name: &str) -> Result<Option<Vec<f64>>> {
    let Some(s) = text(el, tag) else {
        return Ok(None);
    };
    s.split('\\')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::parse(FORMAT, name, format!("invalid decimal `{p}`")))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn us(el: &Elements, tag: Tag) -> Option<u16> {
    el.get(&tag).filter(|b| b.len() >= 2).map(|b| LittleEndian::read_u16(b))
}

/// One decoded slice file.
#[derive(Debug, Clone)]
pub struct DicomSlice {
    pub series_uid: String,
    pub instance_number: Option<i64>,
    pub position: Option<[f64; 3]>,
    pub orientation: [f64; 6],
    pub rows: usize,
    pub columns: usize,
    /// `(row spacing, column spacing)` in millimetres.
    pub pixel_spacing: [f64; 2],
    pub slice_thickness: Option<f64>,
    pub spacing_between_slices: Option<f64>,
    pub pixels: Vec<f32>,
}

impl DicomSlice {
    fn normal(&self) -> [f64; 3] {
        let o = &self.orientation;
        [
            o[1] * o[5] - o[2] * o[4],
            o[2] * o[3] - o[0] * o[5],
            o[0] * o[4] - o[1] * o[3],
        ]
    }
}

/// Parses a single part-10 file. Returns `Ok(None)` for files without the
/// `DICM` preamble or without pixel data (e.g. DICOMDIR, notes).
pub fn read_slice(path: &Path) -> Result<Option<DicomSlice>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 132 || &buf[128..132] != b"DICM" {
        return Ok(None);
    }
    let mut meta = Elements::new();
    let mut cur = Cursor {
        buf: &buf,
        pos: 132,
        explicit: true,
    };
    cur.read_dataset(&mut meta, true)?;
    let syntax = text(&meta, TRANSFER_SYNTAX).unwrap_or_else(|| EXPLICIT_LE.to_string());
    cur.explicit = match syntax.as_str() {
        EXPLICIT_LE => true,
        IMPLICIT_LE => false,
        other => {
            return Err(Error::parse(
                FORMAT,
                "TransferSyntaxUID",
                format!("unsupported transfer syntax {other}"),
            ))
        }
    };
    let mut el = Elements::new();
    cur.read_dataset(&mut el, false)?;
    decode_slice(&el).map_err(|e| match e {
        Error::Parse { field, message, .. } => {
            Error::parse(FORMAT, field, format!("{message} ({})", path.display()))
        }
        other => other,
    })
}

fn decode_slice(el: &Elements) -> Result<Option<DicomSlice>> {
    let (raw, float) = match (el.get(&PIXEL_DATA), el.get(&FLOAT_PIXEL_DATA)) {
        (Some(p), _) => (p, false),
        (None, Some(p)) => (p, true),
        (None, None) => return Ok(None),
    };
    let rows = us(el, ROWS).ok_or_else(|| Error::parse(FORMAT, "Rows", "missing"))? as usize;
    let columns = us(el, COLUMNS).ok_or_else(|| Error::parse(FORMAT, "Columns", "missing"))? as usize;
    if rows == 0 || columns == 0 {
        return Err(Error::parse(FORMAT, "Rows", "zero-sized slice"));
    }
    if us(el, SAMPLES_PER_PIXEL).unwrap_or(1) != 1 {
        return Err(Error::parse(FORMAT, "SamplesPerPixel", "only single-channel images are supported"));
    }
    let n = rows * columns;
    let bits = if float { 32 } else { us(el, BITS_ALLOCATED).unwrap_or(16) };
    let signed = us(el, PIXEL_REPRESENTATION).unwrap_or(0) == 1;
    let need = n * bits as usize / 8;
    if raw.len() < need {
        return Err(Error::parse(
            FORMAT,
            "PixelData",
            format!("expected {need} bytes for {rows}x{columns}, found {}", raw.len()),
        ));
    }
    let raw = &raw[..need];
    let mut pixels: Vec<f32> = match (float, bits, signed) {
        (true, _, _) => raw.chunks_exact(4).map(LittleEndian::read_f32).collect(),
        (false, 8, false) => raw.iter().map(|&b| b as f32).collect(),
        (false, 8, true) => raw.iter().map(|&b| b as i8 as f32).collect(),
        (false, 16, false) => raw.chunks_exact(2).map(|c| LittleEndian::read_u16(c) as f32).collect(),
        (false, 16, true) => raw.chunks_exact(2).map(|c| LittleEndian::read_i16(c) as f32).collect(),
        (false, 32, false) => raw.chunks_exact(4).map(|c| LittleEndian::read_u32(c) as f32).collect(),
        (false, 32, true) => raw.chunks_exact(4).map(|c| LittleEndian::read_i32(c) as f32).collect(),
        (false, b, _) => {
            return Err(Error::parse(FORMAT, "BitsAllocated", format!("unsupported bit depth {b}")))
        }
    };
    let slope = decimals(el, RESCALE_SLOPE, "RescaleSlope")?.and_then(|v| v.first().copied());
    let intercept = decimals(el, RESCALE_INTERCEPT, "RescaleIntercept")?.and_then(|v| v.first().copied());
    if !float {
        let (s, i) = (slope.unwrap_or(1.0), intercept.unwrap_or(0.0));
        if s != 1.0 || i != 0.0 {
            for p in &mut pixels {
                *p = (*p as f64 * s + i) as f32;
            }
        }
    }

    let position = match decimals(el, IMAGE_POSITION, "ImagePositionPatient")? {
        Some(v) if v.len() == 3 => Some([v[0], v[1], v[2]]),
        Some(_) => return Err(Error::parse(FORMAT, "ImagePositionPatient", "expected 3 values")),
        None => None,
    };
    let orientation = match decimals(el, IMAGE_ORIENTATION, "ImageOrientationPatient")? {
        Some(v) if v.len() == 6 => [v[0], v[1], v[2], v[3], v[4], v[5]],
        Some(_) => return Err(Error::parse(FORMAT, "ImageOrientationPatient", "expected 6 values")),
        None => [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
    };
    let pixel_spacing = match decimals(el, PIXEL_SPACING, "PixelSpacing")? {
        Some(v) if v.len() == 2 => [v[0], v[1]],
        Some(_) => return Err(Error::parse(FORMAT, "PixelSpacing", "expected 2 values")),
        None => [1.0, 1.0],
    };
    let instance_number = match text(el, INSTANCE_NUMBER) {
        Some(s) if !s.is_empty() => Some(
            s.parse::<i64>()
                .map_err(|_| Error::parse(FORMAT, "InstanceNumber", format!("invalid integer `{s}`")))?,
        ),
        _ => None,
    };
    let first = |tag, name| -> Result<Option<f64>> { Ok(decimals(el, tag, name)?.and_then(|v| v.first().copied())) };
    Ok(Some(DicomSlice {
        series_uid: text(el, SERIES_UID).unwrap_or_default(),
        instance_number,
        position,
        orientation,
        rows,
        columns,
        pixel_spacing,
        slice_thickness: first(SLICE_THICKNESS, "SliceThickness")?,
        spacing_between_slices: first(SLICE_SPACING, "SpacingBetweenSlices")?,
        pixels,
    }))
}

/// Loads every slice file directly inside `dir` and stacks them along the
/// slice normal. The case ID is the directory name.
pub fn load_dicom_series(dir: &Path, dataset: DatasetId) -> Result<Volume> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut slices = Vec::new();
    for f in &files {
        if let Some(s) = read_slice(f)? {
            slices.push(s);
        }
    }
    let case_id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    stack_slices(slices, case_id, dataset)
        .map_err(|e| match e {
            Error::Parse { field, message, .. } => {
                Error::parse(FORMAT, field, format!("{message} in {}", dir.display()))
            }
            other => other,
        })
}

fn stack_slices(mut slices: Vec<DicomSlice>, case_id: String, dataset: DatasetId) -> Result<Volume> {
    let Some(first) = slices.first() else {
        return Err(Error::parse(FORMAT, "series", "zero readable slices"));
    };
    let uid = first.series_uid.clone();
    if let Some(other) = slices.iter().find(|s| s.series_uid != uid) {
        return Err(Error::parse(
            FORMAT,
            "SeriesInstanceUID",
            format!("mixed series: `{uid}` and `{}`", other.series_uid),
        ));
    }
    let (rows, cols, ps, orient) = (first.rows, first.columns, first.pixel_spacing, first.orientation);
    for s in &slices {
        if s.rows != rows || s.columns != cols {
            return Err(Error::parse(
                FORMAT,
                "Rows/Columns",
                format!("inconsistent slice geometry: {}x{} vs {rows}x{cols}", s.rows, s.columns),
            ));
        }
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-4);
        if !close(&s.pixel_spacing, &ps) || !close(&s.orientation, &orient) {
            return Err(Error::parse(
                FORMAT,
                "PixelSpacing/ImageOrientationPatient",
                "inconsistent slice geometry across the series",
            ));
        }
    }

    let normal = first.normal();
    let by_position = slices.iter().all(|s| s.position.is_some());
    let project = |s: &DicomSlice| {
        let p = s.position.unwrap_or_default();
        p[0] * normal[0] + p[1] * normal[1] + p[2] * normal[2]
    };
    if by_position {
        slices.sort_by(|a, b| {
            project(a)
                .total_cmp(&project(b))
                .then(a.instance_number.cmp(&b.instance_number))
        });
    } else {
        slices.sort_by_key(|s| s.instance_number);
    }

    let dz = if by_position && slices.len() > 1 {
        let span = project(&slices[slices.len() - 1]) - project(&slices[0]);
        span / (slices.len() - 1) as f64
    } else {
        0.0
    };
    let dz = if dz > 0.0 {
        dz
    } else {
        slices[0]
            .spacing_between_slices
            .or(slices[0].slice_thickness)
            .filter(|v| *v > 0.0)
            .unwrap_or(1.0)
    };
    let spacing: Spacing = [ps[1], ps[0], dz];
    let depth = slices.len();
    let mut data = Vec::with_capacity(depth * rows * cols);
    for s in slices {
        data.extend_from_slice(&s.pixels);
    }
    let voxels = Array3::from_shape_vec((depth, rows, cols), data).expect("sized");
    Volume::new(voxels, spacing, case_id, dataset)
}

// ---------------------------------------------------------------- writer

/// Options for [`write_series`].
#[derive(Debug, Clone)]
pub struct SeriesWriteOptions {
    pub series_uid: String,
    /// Write ImagePositionPatient; without it readers fall back to InstanceNumber.
    pub with_position: bool,
    pub implicit_vr: bool,
    /// InstanceNumber for each slice (defaults to `1..=depth`).
    pub instance_numbers: Option<Vec<i64>>,
}

impl Default for SeriesWriteOptions {
    fn default() -> Self {
        SeriesWriteOptions {
            series_uid: "1.2.826.0.1.3680043.2.1125.1".into(),
            with_position: true,
            implicit_vr: false,
            instance_numbers: None,
        }
    }
}

fn ds(v: f64) -> String {
    let s = format!("{v}");
    if s.len() <= 16 {
        return s;
    }
    (0..10)
        .rev()
        .map(|p| format!("{v:.p$e}"))
        .find(|s| s.len() <= 16)
        .unwrap_or_else(|| format!("{v:.3e}"))
}

struct Writer {
    out: Vec<u8>,
    explicit: bool,
}

impl Writer {
    fn element(&mut self, tag: Tag, vr: &[u8; 2], value: &[u8]) {
        let mut value = value.to_vec();
        if value.len() % 2 == 1 {
            value.push(if matches!(vr, b"UI" | b"OB") { 0 } else { b' ' });
        }
        self.out.extend_from_slice(&tag.0.to_le_bytes());
        self.out.extend_from_slice(&tag.1.to_le_bytes());
        let long = matches!(vr, b"OB" | b"OW" | b"OF" | b"SQ" | b"UT" | b"UN");
        if self.explicit {
            self.out.extend_from_slice(vr);
            if long {
                self.out.extend_from_slice(&[0, 0]);
                self.out.extend_from_slice(&(value.len() as u32).to_le_bytes());
            } else {
                self.out.extend_from_slice(&(value.len() as u16).to_le_bytes());
            }
        } else {
            self.out.extend_from_slice(&(value.len() as u32).to_le_bytes());
        }
        self.out.extend_from_slice(&value);
    }

    fn text(&mut self, tag: Tag, vr: &[u8; 2], s: &str) {
        self.element(tag, vr, s.as_bytes());
    }

    fn us(&mut self, tag: Tag, v: u16) {
        self.element(tag, b"US", &v.to_le_bytes());
    }
}

/// Writes `vol` as one part-10 file per slice (`slice_NNN.dcm`) into `dir`.
///
/// Integer-valued volumes within the 16-bit signed range are stored as
/// PixelData; anything else goes to Float Pixel Data so that values
/// round-trip exactly.
pub fn write_series(dir: &Path, vol: &Volume, opts: &SeriesWriteOptions) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (depth, rows, cols) = vol.dims();
    if rows > u16::MAX as usize || cols > u16::MAX as usize {
        return Err(Error::Shape("slice too large for DICOM".into()));
    }
    let numbers = opts
        .instance_numbers
        .clone()
        .unwrap_or_else(|| (1..=depth as i64).collect());
    if numbers.len() != depth {
        return Err(Error::InvalidArgument("one instance number per slice required".into()));
    }
    let as_int = vol
        .voxels
        .iter()
        .all(|&v| v.fract() == 0.0 && (i16::MIN as f32..=i16::MAX as f32).contains(&v));
    let [dx, dy, dz] = vol.spacing;
    for (k, slice) in vol.voxels.outer_iter().enumerate() {
        let mut meta = Writer {
            out: Vec::new(),
            explicit: true,
        };
        meta.element((0x0002, 0x0001), b"OB", &[0, 1]);
        meta.text((0x0002, 0x0002), b"UI", "1.2.840.10008.5.1.4.1.1.4");
        meta.text((0x0002, 0x0003), b"UI", &format!("{}.{}", opts.series_uid, k + 1));
        meta.text(TRANSFER_SYNTAX, b"UI", if opts.implicit_vr { IMPLICIT_LE } else { EXPLICIT_LE });
        let mut body = Writer {
            out: Vec::new(),
            explicit: !opts.implicit_vr,
        };
        body.text((0x0008, 0x0060), b"CS", "MR");
        body.text(SLICE_THICKNESS, b"DS", &ds(dz));
        body.text(SLICE_SPACING, b"DS", &ds(dz));
        body.text(SERIES_UID, b"UI", &opts.series_uid);
        body.text(INSTANCE_NUMBER, b"IS", &numbers[k].to_string());
        if opts.with_position {
            body.text(IMAGE_POSITION, b"DS", &format!("0\\0\\{}", ds(k as f64 * dz)));
        }
        body.text(IMAGE_ORIENTATION, b"DS", "1\\0\\0\\0\\1\\0");
        body.us(SAMPLES_PER_PIXEL, 1);
        body.text((0x0028, 0x0004), b"CS", "MONOCHROME2");
        body.us(ROWS, rows as u16);
        body.us(COLUMNS, cols as u16);
        body.text(PIXEL_SPACING, b"DS", &format!("{}\\{}", ds(dy), ds(dx)));
        if as_int {
            body.us(BITS_ALLOCATED, 16);
            body.us((0x0028, 0x0101), 16);
            body.us((0x0028, 0x0102), 15);
            body.us(PIXEL_REPRESENTATION, 1);
            let bytes: Vec<u8> = slice.iter().flat_map(|&v| (v as i16).to_le_bytes()).collect();
            body.element(PIXEL_DATA, b"OW", &bytes);
        } else {
            body.us(BITS_ALLOCATED, 32);
            let bytes: Vec<u8> = slice.iter().flat_map(|&v| v.to_le_bytes()).collect();
            body.element(FLOAT_PIXEL_DATA, b"OF", &bytes);
        }

        let mut out = vec![0u8; 128];
        out.extend_from_slice(b"DICM");
        let mut group_len = Writer {
            out: Vec::new(),
            explicit: true,
        };
        group_len.element((0x0002, 0x0000), b"UL", &(meta.out.len() as u32).to_le_bytes());
        out.extend_from_slice(&group_len.out);
        out.extend_from_slice(&meta.out);
        out.extend_from_slice(&body.out);
        let path = dir.join(format!("slice_{:03}.dcm", k + 1));
        fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
