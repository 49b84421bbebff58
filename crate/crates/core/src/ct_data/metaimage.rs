//! MetaImage text header plus a detached little-endian raw voxel file.
//!
//! Header axes are listed `x y z`; the in-memory grid is `z, y, x` with `x`
//! fastest, which is also the on-disk element order.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};

use super::volume::{Geometry, Volume};
use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    Short,
    Float,
    Double,
}

impl ElementType {
    pub fn tag(self) -> &'static str {
        match self {
            ElementType::Short => "MET_SHORT",
            ElementType::Float => "MET_FLOAT",
            ElementType::Double => "MET_DOUBLE",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        match tag {
            "MET_SHORT" => Some(ElementType::Short),
            "MET_FLOAT" => Some(ElementType::Float),
            "MET_DOUBLE" => Some(ElementType::Double),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            ElementType::Short => 2,
            ElementType::Float => 4,
            ElementType::Double => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub geometry: Geometry,
    pub element_type: ElementType,
    pub data_file: String,
}

fn triple(path: &Path, fields: &HashMap<String, String>, key: &str) -> Result<[f64; 3]> {
    let raw = fields.get(key).ok_or_else(|| Error::format(path, format!("missing {key}")))?;
    let v: Vec<f64> = raw
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(path, format!("{key}: {e}")))?;
    if v.len() != 3 {
        return Err(Error::format(path, format!("{key} needs 3 values, got {}", v.len())));
    }
    // header order is x y z
    Ok([v[2], v[1], v[0]])
}

pub fn parse_header(path: &Path, text: &str) -> Result<Header> {
    let mut fields = HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("malformed header line `{line}`")))?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    match fields.get("NDims").map(String::as_str) {
        Some("3") => {}
        other => return Err(Error::format(path, format!("NDims must be 3, got {other:?}"))),
    }
    if let Some(msb) = fields.get("BinaryDataByteOrderMSB").or_else(|| fields.get("ElementByteOrderMSB")) {
        if msb.eq_ignore_ascii_case("true") {
            return Err(Error::format(path, "big-endian data is not supported"));
        }
    }
    if fields.get("CompressedData").is_some_and(|v| v.eq_ignore_ascii_case("true")) {
        return Err(Error::format(path, "compressed data is not supported"));
    }
    let dims_f = triple(path, &fields, "DimSize")?;
    if dims_f.iter().any(|&d| d < 1.0 || d.fract() != 0.0) {
        return Err(Error::format(path, format!("bad DimSize {dims_f:?}")));
    }
    let dims = dims_f.map(|d| d as usize);
    let origin = if fields.contains_key("Offset") {
        triple(path, &fields, "Offset")?
    } else if fields.contains_key("Origin") {
        triple(path, &fields, "Origin")?
    } else {
        [0.0; 3]
    };
    let spacing = if fields.contains_key("ElementSpacing") { triple(path, &fields, "ElementSpacing")? } else { [1.0; 3] };
    let tag = fields.get("ElementType").ok_or_else(|| Error::format(path, "missing ElementType"))?;
    let element_type =
        ElementType::parse(tag).ok_or_else(|| Error::format(path, format!("unsupported element type {tag}")))?;
    let data_file = fields.get("ElementDataFile").ok_or_else(|| Error::format(path, "missing ElementDataFile"))?.clone();
    if data_file == "LOCAL" || data_file == "LIST" || data_file.contains('%') {
        return Err(Error::format(path, format!("unsupported ElementDataFile {data_file}")));
    }
    let geometry = Geometry::new(dims, origin, spacing).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Header { geometry, element_type, data_file })
}

fn raw_path(header_path: &Path, data_file: &str) -> PathBuf {
    header_path.parent().unwrap_or(Path::new(".")).join(data_file)
}

/// Read a header file and its raw voxels. The scan id is the header file stem.
pub fn load_volume<T: Scalar>(path: &Path) -> Result<Volume<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(path, &text)?;
    let raw = raw_path(path, &header.data_file);
    if !raw.is_file() {
        return Err(Error::RawMissing(raw));
    }
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let n = header.geometry.len();
    let size = header.element_type.size();
    if bytes.len() != n * size {
        return Err(Error::format(&raw, format!("expected {} bytes for {:?}, found {}", n * size, header.geometry.dims, bytes.len())));
    }
    let voxels: Vec<T> = match header.element_type {
        ElementType::Short => bytes.chunks_exact(2).map(|b| T::lit(LittleEndian::read_i16(b) as f64)).collect(),
        ElementType::Float => bytes.chunks_exact(4).map(|b| T::lit(LittleEndian::read_f32(b) as f64)).collect(),
        ElementType::Double => bytes.chunks_exact(8).map(|b| T::lit(LittleEndian::read_f64(b))).collect(),
    };
    let scan_id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Volume::new(scan_id, header.geometry, voxels).map_err(|e| Error::format(path, e.to_string()))
}

pub fn format_header(geometry: &Geometry, element_type: ElementType, data_file: &str) -> String {
    let xyz = |t: [f64; 3]| format!("{} {} {}", t[2], t[1], t[0]);
    let d = geometry.dims;
    format!(
        "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\nCompressedData = False\n\
         Offset = {}\nElementSpacing = {}\nDimSize = {} {} {}\nElementType = {}\nElementDataFile = {}\n",
        xyz(geometry.origin),
        xyz(geometry.spacing),
        d[2],
        d[1],
        d[0],
        element_type.tag(),
        data_file
    )
}

/// Write `<stem>.mhd` + `<stem>.raw` next to each other.
///
/// `MET_SHORT` rounds to the nearest integer and saturates at the i16 range.
pub fn save_volume<T: Scalar>(path: &Path, volume: &Volume<T>, element_type: ElementType) -> Result<()> {
    let stem = path
        .file_stem()
        .ok_or_else(|| Error::Invalid(format!("{} has no file name", path.display())))?
        .to_string_lossy()
        .into_owned();
    let data_file = format!("{stem}.raw");
    let raw = raw_path(path, &data_file);
    let mut bytes = vec![0u8; volume.voxels.len() * element_type.size()];
    match element_type {
        ElementType::Short => {
            for (b, v) in bytes.chunks_exact_mut(2).zip(&volume.voxels) {
                let s = v.as_f64().round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
                LittleEndian::write_i16(b, s);
            }
        }
        ElementType::Float => {
            for (b, v) in bytes.chunks_exact_mut(4).zip(&volume.voxels) {
                LittleEndian::write_f32(b, v.as_f64() as f32);
            }
        }
        ElementType::Double => {
            for (b, v) in bytes.chunks_exact_mut(8).zip(&volume.voxels) {
                LittleEndian::write_f64(b, v.as_f64());
            }
        }
    }
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    fs::write(path, format_header(&volume.geometry, element_type, &data_file)).map_err(|e| Error::io(path, e))
}
