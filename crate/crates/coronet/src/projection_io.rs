//! Projection files: `viewN.f32` little-endian line integrals, u-fastest,
//! with a `viewN.json` sidecar holding the view geometry, plus a 16-bit
//! grayscale `viewN.png` preview whose min-max scaling is recorded in the
//! sidecar.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use coronet_core::projector::ProjectionImage;
use serde::{Deserialize, Serialize};

use crate::config::ViewSpec;
use crate::error::{CliError, Result};
use crate::volume_io::{f32_from_le_bytes, f32_to_le_bytes, parse_header, read_file, write_file};

pub const PROJECTION_FORMAT: &str = "coronet-projection";
pub const PROJECTION_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PngScaling {
    pub file: String,
    /// Value mapped to 0.
    pub min: f64,
    /// Value mapped to 65535.
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionHeader {
    pub format: String,
    pub version: u32,
    pub view_id: usize,
    pub geometry: ViewSpec,
    pub dtype: String,
    pub byte_order: String,
    /// Standard deviation of added Gaussian noise; zero for clean data.
    pub noise_std: f64,
    pub png: Option<PngScaling>,
}

pub fn view_stem(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("view{view}"))
}

/// Write one raster, sidecar and PNG per view into `dir`.
pub fn save_projections(dir: &Path, images: &[ProjectionImage<f32>], noise_std: f64) -> Result<()> {
    for (i, img) in images.iter().enumerate() {
        let stem = view_stem(dir, i);
        let raw = stem.with_extension("f32");
        write_file(&raw, &f32_to_le_bytes(&img.data))?;
        let png_path = stem.with_extension("png");
        let (min, max) = write_png16(&png_path, img)?;
        let header = ProjectionHeader {
            format: PROJECTION_FORMAT.into(),
            version: PROJECTION_VERSION,
            view_id: img.view_id,
            geometry: ViewSpec::from_geometry(&img.geometry),
            dtype: "f32".into(),
            byte_order: "little".into(),
            noise_std,
            png: Some(PngScaling { file: format!("view{i}.png"), min, max }),
        };
        let text = serde_json::to_string_pretty(&header).expect("header serializes");
        write_file(&stem.with_extension("json"), text.as_bytes())?;
    }
    Ok(())
}

/// Min-max scale to 16 bits; rows run along v, pixels along u.
pub fn write_png16(path: &Path, img: &ProjectionImage<f32>) -> Result<(f64, f64)> {
    let g = &img.geometry;
    let min = img.data.iter().fold(f64::INFINITY, |m, &v| m.min(v as f64));
    let max = img.data.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let span = if max > min { max - min } else { 1.0 };
    let mut pixels = Vec::with_capacity(img.data.len() * 2);
    for &v in &img.data {
        let q = (((v as f64 - min) / span) * 65535.0).round().clamp(0.0, 65535.0) as u16;
        pixels.extend(q.to_be_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), g.det_u as u32, g.det_v as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let to_io = |e: png::EncodingError| CliError::io(path, std::io::Error::other(e));
    let mut w = enc.write_header().map_err(to_io)?;
    w.write_image_data(&pixels).map_err(to_io)?;
    w.finish().map_err(to_io)?;
    Ok((min, max))
}

pub fn load_projection(dir: &Path, view: usize) -> Result<(ProjectionImage<f32>, ProjectionHeader)> {
    let stem = view_stem(dir, view);
    let side = stem.with_extension("json");
    let text = fs::read_to_string(&side).map_err(|e| CliError::io(&side, e))?;
    let h: ProjectionHeader = parse_header(&side, &text)?;
    if h.format != PROJECTION_FORMAT {
        return Err(CliError::format(&side, "format", format!("expected \"{PROJECTION_FORMAT}\", got \"{}\"", h.format)));
    }
    if h.version != PROJECTION_VERSION {
        return Err(CliError::format(&side, "version", format!("unsupported version {}", h.version)));
    }
    if h.dtype != "f32" || h.byte_order != "little" {
        return Err(CliError::format(&side, "dtype", "only little-endian f32 is supported"));
    }
    let geometry = h.geometry.to_geometry();
    geometry.validate().map_err(|e| CliError::format(&side, "geometry", e.to_string()))?;
    let raw = stem.with_extension("f32");
    let bytes = read_file(&raw)?;
    if bytes.len() != geometry.n_pixels() * 4 {
        return Err(CliError::format(
            &raw,
            "payload",
            format!("{} bytes, detector {}x{} needs {}", bytes.len(), geometry.det_u, geometry.det_v, geometry.n_pixels() * 4),
        ));
    }
    let img = ProjectionImage { view_id: h.view_id, geometry, data: f32_from_le_bytes(&bytes) };
    Ok((img, h))
}

/// Load every `viewN` in `dir`, starting at 0 until one is missing.
pub fn load_projections(dir: &Path) -> Result<Vec<ProjectionImage<f32>>> {
    let mut out = Vec::new();
    while view_stem(dir, out.len()).with_extension("json").exists() {
        out.push(load_projection(dir, out.len())?.0);
    }
    if out.is_empty() {
        return Err(CliError::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "no view0.json projection found")));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use coronet_core::geometry::ProjectionGeometry;

    fn image(view_id: usize) -> ProjectionImage<f32> {
        let geometry = ProjectionGeometry {
            dsd: 990.0,
            dso: 765.0,
            primary_deg: 30.0 * view_id as f64,
            secondary_deg: -5.0,
            det_u: 7,
            det_v: 5,
            du: 0.3,
            dv: 0.35,
        };
        let data = (0..35).map(|i| ((i * 7 + view_id) % 11) as f32 * 0.125 + 1e-7).collect();
        ProjectionImage { view_id, geometry, data }
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = vec![image(0), image(1)];
        save_projections(dir.path(), &imgs, 0.0).unwrap();
        assert_eq!(load_projections(dir.path()).unwrap(), imgs);
    }

    #[test]
    fn png_scaling_is_recorded_and_applied() {
        let dir = tempfile::tempdir().unwrap();
        let img = image(0);
        save_projections(dir.path(), std::slice::from_ref(&img), 0.0).unwrap();
        let (_, h) = load_projection(dir.path(), 0).unwrap();
        let s = h.png.unwrap();
        let min = img.data.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
        let max = img.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        assert_eq!((s.min, s.max), (min, max));

        let decoder = png::Decoder::new(std::io::BufReader::new(fs::File::open(dir.path().join(&s.file)).unwrap()));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height, info.bit_depth), (7, 5, png::BitDepth::Sixteen));
        for (i, v) in img.data.iter().enumerate() {
            let q = u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as f64;
            let back = min + q / 65535.0 * (max - min);
            assert!((back - *v as f64).abs() <= (max - min) / 65535.0);
        }
    }

    #[test]
    fn short_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_projections(dir.path(), &[image(0)], 0.0).unwrap();
        let raw = dir.path().join("view0.f32");
        let b = fs::read(&raw).unwrap();
        fs::write(&raw, &b[..b.len() - 4]).unwrap();
        assert!(matches!(load_projections(dir.path()), Err(CliError::Format { field, .. }) if field == "payload"));
    }
}
