//! Native volume files: a little-endian raster plus a JSON sidecar.
//!
//! `name.raw` holds the voxels x-fastest, either `u8` (binary masks) or
//! `f32` (continuous occupancy). `name.json` records shape, spacing, value
//! kind and a format version. Loading checks the sidecar against the
//! payload and reports the offending field by name.

use std::fs;
use std::path::{Path, PathBuf};

use coronet_core::geometry::{BinaryVolume, GridSpec, VolumeGrid};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const VOLUME_FORMAT: &str = "coronet-volume";
pub const VOLUME_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Binary,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    F32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub format: String,
    pub version: u32,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub kind: ValueKind,
    pub dtype: DType,
    pub byte_order: String,
}

impl VolumeHeader {
    pub fn payload_len(&self) -> usize {
        self.dims.iter().product::<usize>() * self.dtype.size()
    }
}

/// A volume as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Binary(BinaryVolume),
    Continuous(VolumeGrid<f32>),
}

impl Volume {
    pub fn grid(&self) -> GridSpec {
        match self {
            Volume::Binary(v) => v.spec,
            Volume::Continuous(v) => v.spec,
        }
    }

    pub fn to_f32(&self) -> VolumeGrid<f32> {
        match self {
            Volume::Binary(v) => v.to_real(),
            Volume::Continuous(v) => v.clone(),
        }
    }

    /// The mask itself for binary volumes, `v >= threshold` otherwise.
    pub fn to_mask(&self, threshold: f64) -> BinaryVolume {
        match self {
            Volume::Binary(v) => v.clone(),
            Volume::Continuous(v) => v.to_mask(threshold),
        }
    }

    fn header(&self) -> VolumeHeader {
        let grid = self.grid();
        let (kind, dtype) = match self {
            Volume::Binary(_) => (ValueKind::Binary, DType::U8),
            Volume::Continuous(_) => (ValueKind::Continuous, DType::F32),
        };
        VolumeHeader {
            format: VOLUME_FORMAT.into(),
            version: VOLUME_VERSION,
            dims: grid.dims,
            spacing_mm: grid.spacing,
            kind,
            dtype,
            byte_order: "little".into(),
        }
    }
}

/// Sidecar path belonging to a raster path.
pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn f32_to_le_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f32_from_le_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

/// Write `path` and its sidecar.
pub fn save_volume(path: &Path, vol: &Volume) -> Result<()> {
    let payload = match vol {
        Volume::Binary(v) => v.data.clone(),
        Volume::Continuous(v) => f32_to_le_bytes(&v.data),
    };
    write_file(path, &payload)?;
    let header = serde_json::to_string_pretty(&vol.header()).expect("header serializes");
    write_file(&sidecar_path(path), header.as_bytes())
}

/// Parse a sidecar, naming the first bad field on failure.
pub fn parse_header<H: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<H> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.inner().to_string();
        let field = match inner.split('`').nth(1) {
            Some(name) if inner.starts_with("missing field") || inner.starts_with("unknown field") => {
                if field == "." {
                    name.to_string()
                } else {
                    format!("{field}.{name}")
                }
            }
            _ => field,
        };
        CliError::format(path, field, inner)
    })
}

pub fn load_header(raw: &Path) -> Result<VolumeHeader> {
    let side = sidecar_path(raw);
    let text = fs::read_to_string(&side).map_err(|e| CliError::io(&side, e))?;
    let h: VolumeHeader = parse_header(&side, &text)?;
    if h.format != VOLUME_FORMAT {
        return Err(CliError::format(&side, "format", format!("expected \"{VOLUME_FORMAT}\", got \"{}\"", h.format)));
    }
    if h.version != VOLUME_VERSION {
        return Err(CliError::format(&side, "version", format!("unsupported version {} (this build reads {VOLUME_VERSION})", h.version)));
    }
    if h.byte_order != "little" {
        return Err(CliError::format(&side, "byte_order", format!("only \"little\" is supported, got \"{}\"", h.byte_order)));
    }
    if let Err(e) = GridSpec::new(h.dims, h.spacing_mm) {
        let field = match &e {
            coronet_core::Error::Invalid { field, .. } if field.contains("spacing") => "spacing_mm",
            _ => "dims",
        };
        return Err(CliError::format(&side, field, e.to_string()));
    }
    match (h.kind, h.dtype) {
        (ValueKind::Binary, DType::U8) | (ValueKind::Continuous, DType::F32) => {}
        (k, d) => {
            return Err(CliError::format(&side, "dtype", format!("{d:?} does not match kind {k:?}").to_lowercase()));
        }
    }
    Ok(h)
}

/// Load `path`, checking it against its sidecar.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let h = load_header(path)?;
    let bytes = read_file(path)?;
    if bytes.len() != h.payload_len() {
        let what = if bytes.len() < h.payload_len() { "truncated" } else { "oversized" };
        return Err(CliError::format(
            path,
            "payload",
            format!("{what}: {} bytes, header dims {:?} need {}", bytes.len(), h.dims, h.payload_len()),
        ));
    }
    let grid = GridSpec::new(h.dims, h.spacing_mm)?;
    Ok(match h.kind {
        ValueKind::Binary => {
            if let Some(i) = bytes.iter().position(|&b| b > 1) {
                return Err(CliError::format(path, "payload", format!("binary volume has value {} at voxel {i}", bytes[i])));
            }
            Volume::Binary(VolumeGrid::new(grid, bytes)?)
        }
        ValueKind::Continuous => Volume::Continuous(VolumeGrid::new(grid, f32_from_le_bytes(&bytes))?),
    })
}
