//! Read-only import of NRRD and NIfTI-1 volumes.
//!
//! Only uncompressed payloads are accepted. The header's axis vectors
//! (NRRD `space directions`, NIfTI `sform`) decide how data axes map onto
//! world x/y/z; permuted or flipped axes are remapped so the result is
//! stored x-fastest along +x, +y, +z like every other volume here.

use std::path::Path;

use coronet_core::geometry::{GridSpec, VolumeGrid};

use crate::error::{CliError, Result};
use crate::volume_io::{load_volume, read_file, Volume};

/// Load a native `.raw`, `.nrrd`, `.nhdr` or `.nii` volume by extension.
pub fn import_volume(path: &Path) -> Result<Volume> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "nrrd" | "nhdr" => read_nrrd(path),
        "nii" => read_nifti(path),
        "gz" => Err(CliError::format(path, "encoding", "compressed volumes are not supported; decompress first")),
        _ => load_volume(path),
    }
}

#[derive(Debug, Clone, Copy)]
enum Scalar {
    U8,
    I8,
    U16,
    I16,
    U32,
    I32,
    F32,
    F64,
}

impl Scalar {
    fn size(self) -> usize {
        match self {
            Scalar::U8 | Scalar::I8 => 1,
            Scalar::U16 | Scalar::I16 => 2,
            Scalar::U32 | Scalar::I32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn decode(self, bytes: &[u8], little: bool) -> Vec<f64> {
        let n = self.size();
        bytes
            .chunks_exact(n)
            .map(|c| {
                let mut b = [0u8; 8];
                b[..n].copy_from_slice(c);
                if !little {
                    b[..n].reverse();
                }
                match self {
                    Scalar::U8 => b[0] as f64,
                    Scalar::I8 => b[0] as i8 as f64,
                    Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
                    Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
                    Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
                    Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
                    Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
                    Scalar::F64 => f64::from_le_bytes(b),
                }
            })
            .collect()
    }
}

/// Reorder data given per-data-axis world direction vectors.
///
/// Each direction must be dominated by a distinct world axis; its length is
/// the spacing and a negative sign flips that axis.
fn remap(path: &Path, values: Vec<f64>, dims: [usize; 3], dirs: [[f64; 3]; 3]) -> Result<Volume> {
    let mut world_of = [0usize; 3];
    let mut flip = [false; 3];
    let mut spacing = [0.0; 3];
    let mut seen = [false; 3];
    for (a, d) in dirs.iter().enumerate() {
        let w = (0..3).max_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs())).expect("three axes");
        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if seen[w] || !(len > 0.0 && len.is_finite()) {
            return Err(CliError::format(path, "space directions", format!("axis vectors {dirs:?} are not a permutation of the world axes")));
        }
        seen[w] = true;
        world_of[a] = w;
        flip[a] = d[w] < 0.0;
        spacing[w] = len;
    }
    let mut out_dims = [0usize; 3];
    for a in 0..3 {
        out_dims[world_of[a]] = dims[a];
    }
    let grid = GridSpec::new(out_dims, spacing).map_err(|e| CliError::format(path, "dims", e.to_string()))?;
    let mut data = vec![0.0f32; grid.len()];
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let src = [i, j, k];
                let mut dst = [0usize; 3];
                for a in 0..3 {
                    dst[world_of[a]] = if flip[a] { dims[a] - 1 - src[a] } else { src[a] };
                }
                data[grid.offset(dst[0], dst[1], dst[2])] = values[i + dims[0] * (j + dims[1] * k)] as f32;
            }
        }
    }
    let binary = data.iter().all(|&v| v == 0.0 || v == 1.0);
    Ok(if binary {
        Volume::Binary(VolumeGrid::new(grid, data.iter().map(|&v| v as u8).collect())?)
    } else {
        Volume::Continuous(VolumeGrid::new(grid, data)?)
    })
}

fn parse_nrrd_vector(s: &str) -> Option<[f64; 3]> {
    let inner = s.trim().strip_prefix('(')?.strip_suffix(')')?;
    let v: Vec<f64> = inner.split(',').map(|x| x.trim().parse().ok()).collect::<Option<_>>()?;
    v.try_into().ok()
}

fn read_nrrd(path: &Path) -> Result<Volume> {
    let bytes = read_file(path)?;
    let bad = |field: &str, reason: String| CliError::format(path, field, reason);
    if !bytes.starts_with(b"NRRD") {
        return Err(bad("magic", "file does not start with NRRD".into()));
    }
    // Header ends at the first empty line.
    let mut end = None;
    let mut pos = 0;
    while pos < bytes.len() {
        let nl = bytes[pos..].iter().position(|&b| b == b'\n').map(|p| pos + p);
        let Some(nl) = nl else { break };
        let line = &bytes[pos..nl];
        if line.is_empty() || line == b"\r" {
            end = Some(nl + 1);
            break;
        }
        pos = nl + 1;
    }
    let header_end = end.unwrap_or(bytes.len());
    let header = String::from_utf8_lossy(&bytes[..header_end]).into_owned();
    let mut fields = std::collections::HashMap::new();
    for line in header.lines().skip(1) {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if let Some((k, v)) = line.split_once(": ") {
            fields.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
    }
    let get = |k: &str| fields.get(k).ok_or_else(|| bad(k, "missing".into()));
    let dimension: usize = get("dimension")?.parse().map_err(|_| bad("dimension", "not an integer".into()))?;
    if dimension != 3 {
        return Err(bad("dimension", format!("expected 3, got {dimension}")));
    }
    let sizes: Vec<usize> = get("sizes")?
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| bad("sizes", format!("bad size {s:?}"))))
        .collect::<Result<_>>()?;
    let dims: [usize; 3] = sizes.try_into().map_err(|_| bad("sizes", "expected three sizes".into()))?;
    let scalar = match get("type")?.as_str() {
        "uchar" | "uint8" | "uint8_t" | "unsigned char" => Scalar::U8,
        "signed char" | "int8" | "int8_t" => Scalar::I8,
        "ushort" | "uint16" | "uint16_t" | "unsigned short" | "unsigned short int" => Scalar::U16,
        "short" | "int16" | "int16_t" | "short int" | "signed short" | "signed short int" => Scalar::I16,
        "uint" | "uint32" | "uint32_t" | "unsigned int" => Scalar::U32,
        "int" | "int32" | "int32_t" | "signed int" => Scalar::I32,
        "float" => Scalar::F32,
        "double" => Scalar::F64,
        t => return Err(bad("type", format!("unsupported type {t:?}"))),
    };
    let encoding = get("encoding")?;
    if encoding != "raw" {
        return Err(bad("encoding", format!("only raw encoding is supported, got {encoding:?}")));
    }
    let little = fields.get("endian").map(|e| e != "big").unwrap_or(true);
    let dirs = if let Some(sd) = fields.get("space directions") {
        let parts: Vec<&str> = sd.split(')').filter(|s| !s.trim().is_empty()).collect();
        let v: Vec<[f64; 3]> = parts
            .iter()
            .map(|p| parse_nrrd_vector(&format!("{})", p.trim())).ok_or_else(|| bad("space directions", format!("bad vector {p:?}"))))
            .collect::<Result<_>>()?;
        v.try_into().map_err(|_| bad("space directions", "expected three vectors".into()))?
    } else if let Some(sp) = fields.get("spacings") {
        let s: Vec<f64> = sp
            .split_whitespace()
            .map(|x| x.parse().map_err(|_| bad("spacings", format!("bad spacing {x:?}"))))
            .collect::<Result<_>>()?;
        let s: [f64; 3] = s.try_into().map_err(|_| bad("spacings", "expected three spacings".into()))?;
        [[s[0], 0.0, 0.0], [0.0, s[1], 0.0], [0.0, 0.0, s[2]]]
    } else {
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    };
    let payload = match fields.get("data file").or_else(|| fields.get("datafile")) {
        Some(f) => {
            let p = path.parent().unwrap_or(Path::new(".")).join(f);
            read_file(&p)?
        }
        None => bytes[header_end..].to_vec(),
    };
    let need = dims.iter().product::<usize>() * scalar.size();
    if payload.len() < need {
        return Err(bad("payload", format!("truncated: {} bytes, need {need}", payload.len())));
    }
    let values = scalar.decode(&payload[payload.len() - need..], little);
    remap(path, values, dims, dirs)
}

fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = read_file(path)?;
    let bad = |field: &str, reason: String| CliError::format(path, field, reason);
    if bytes.len() < 348 {
        return Err(bad("sizeof_hdr", format!("file has only {} bytes", bytes.len())));
    }
    let little = match (i32::from_le_bytes(bytes[0..4].try_into().unwrap()), i32::from_be_bytes(bytes[0..4].try_into().unwrap())) {
        (348, _) => true,
        (_, 348) => false,
        _ => return Err(bad("sizeof_hdr", "not a NIfTI-1 header".into())),
    };
    if &bytes[344..347] != b"n+1" {
        return Err(bad("magic", "only single-file NIfTI-1 (n+1) is supported".into()));
    }
    let i16_at = |o: usize| {
        let b = [bytes[o], bytes[o + 1]];
        if little { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) }
    };
    let f32_at = |o: usize| {
        let b: [u8; 4] = bytes[o..o + 4].try_into().unwrap();
        if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }
    };
    let ndim = i16_at(40);
    if !(3..=4).contains(&ndim) || (ndim == 4 && i16_at(48) > 1) {
        return Err(bad("dim", format!("expected a single 3-D volume, got {ndim} dimensions")));
    }
    let dims: [usize; 3] = [0, 1, 2].map(|a| i16_at(42 + 2 * a).max(0) as usize);
    let scalar = match i16_at(70) {
        2 => Scalar::U8,
        4 => Scalar::I16,
        8 => Scalar::I32,
        16 => Scalar::F32,
        64 => Scalar::F64,
        256 => Scalar::I8,
        512 => Scalar::U16,
        768 => Scalar::U32,
        t => return Err(bad("datatype", format!("unsupported datatype code {t}"))),
    };
    let vox_offset = f32_at(108).max(352.0) as usize;
    let slope = f32_at(112) as f64;
    let inter = f32_at(116) as f64;
    let dirs = if i16_at(254) > 0 {
        let rows = [280, 296, 312].map(|o| [f32_at(o), f32_at(o + 4), f32_at(o + 8)]);
        [0, 1, 2].map(|a| [rows[0][a] as f64, rows[1][a] as f64, rows[2][a] as f64])
    } else {
        let p = [1, 2, 3].map(|a| f32_at(76 + 4 * a).abs() as f64);
        [[p[0], 0.0, 0.0], [0.0, p[1], 0.0], [0.0, 0.0, p[2]]]
    };
    let need = dims.iter().product::<usize>() * scalar.size();
    if bytes.len() < vox_offset + need {
        return Err(bad("payload", format!("truncated: {} bytes after header, need {need}", bytes.len().saturating_sub(vox_offset))));
    }
    let mut values = scalar.decode(&bytes[vox_offset..vox_offset + need], little);
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        values.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    remap(path, values, dims, dirs)
}
