//! Binary parameter files, all little-endian.
//!
//! * `HGRD`: hash tables with the encoder hyperparameters.
//! * `MLPW`: MLP weights with their layer shapes.
//! * `SNAP`: full optimizer state for resuming a run bit-for-bit.
//!
//! Each file starts with a 4-byte magic and a `u32` format version.

use std::path::Path;

use coronet_core::hash_encoding::HashEncoderConfig;
use coronet_core::optim::AdamState;
use coronet_core::trainer::TrainState;
use coronet_core::field::FieldParams;

use crate::error::{CliError, Result};
use crate::volume_io::{read_file, write_file};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend(x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(path: &'a Path, bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        let mut r = Self { path, bytes, pos: 0 };
        if r.take(4, "magic")? != magic {
            return Err(CliError::format(path, "magic", format!("expected {:?}", String::from_utf8_lossy(magic))));
        }
        let v = r.u32("version")?;
        if v != CHECKPOINT_VERSION {
            return Err(CliError::format(path, "version", format!("unsupported version {v}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CliError::format(self.path, field, "file truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
    fn f64(&mut self, field: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
    fn f32s(&mut self, field: &str) -> Result<Vec<f32>> {
        let n = self.u64(field)? as usize;
        let b = self.take(n.checked_mul(4).ok_or_else(|| CliError::format(self.path, field, "length overflow"))?, field)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(CliError::format(self.path, "payload", format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn save_hash_tables(path: &Path, cfg: &HashEncoderConfig, theta: &[f32]) -> Result<()> {
    let mut w = Writer::default();
    w.0.extend(b"HGRD");
    w.u32(CHECKPOINT_VERSION);
    w.u32(cfg.levels as u32);
    w.u32(cfg.log2_table_size);
    w.u32(cfg.features as u32);
    w.u32(cfg.base_resolution as u32);
    w.f64(cfg.growth);
    w.u32(cfg.input_dim as u32);
    w.f32s(theta);
    write_file(path, &w.0)
}

pub fn load_hash_tables(path: &Path) -> Result<(HashEncoderConfig, Vec<f32>)> {
    let bytes = read_file(path)?;
    let mut r = Reader::open(path, &bytes, b"HGRD")?;
    let cfg = HashEncoderConfig {
        levels: r.u32("levels")? as usize,
        log2_table_size: r.u32("log2_table_size")?,
        features: r.u32("features")? as usize,
        base_resolution: r.u32("base_resolution")? as usize,
        growth: r.f64("growth")?,
        input_dim: r.u32("input_dim")? as usize,
    };
    cfg.validate().map_err(|e| CliError::format(path, "header", e.to_string()))?;
    let theta = r.f32s("tables")?;
    if theta.len() != cfg.param_count() {
        return Err(CliError::format(path, "tables", format!("{} values, header implies {}", theta.len(), cfg.param_count())));
    }
    r.finish()?;
    Ok((cfg, theta))
}

pub fn save_mlp_weights(path: &Path, shapes: &[(usize, usize)], phi: &[f32]) -> Result<()> {
    let mut w = Writer::default();
    w.0.extend(b"MLPW");
    w.u32(CHECKPOINT_VERSION);
    w.u32(shapes.len() as u32);
    for &(o, i) in shapes {
        w.u32(o as u32);
        w.u32(i as u32);
    }
    w.f32s(phi);
    write_file(path, &w.0)
}

pub fn load_mlp_weights(path: &Path) -> Result<(Vec<(usize, usize)>, Vec<f32>)> {
    let bytes = read_file(path)?;
    let mut r = Reader::open(path, &bytes, b"MLPW")?;
    let n = r.u32("n_layers")? as usize;
    let mut shapes = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        shapes.push((r.u32("layer_shapes")? as usize, r.u32("layer_shapes")? as usize));
    }
    let phi = r.f32s("weights")?;
    let want: usize = shapes.iter().map(|(o, i)| o * i + o).sum();
    if phi.len() != want {
        return Err(CliError::format(path, "weights", format!("{} values, layer shapes imply {want}", phi.len())));
    }
    r.finish()?;
    Ok((shapes, phi))
}

pub fn save_snapshot(path: &Path, s: &TrainState<f32>) -> Result<()> {
    let mut w = Writer::default();
    w.0.extend(b"SNAP");
    w.u32(CHECKPOINT_VERSION);
    w.u64(s.iteration as u64);
    w.f32s(&s.params.theta);
    w.f32s(&s.params.phi);
    for a in [&s.adam_theta, &s.adam_phi] {
        w.u64(a.t);
        w.f32s(&a.m);
        w.f32s(&a.v);
    }
    write_file(path, &w.0)
}

pub fn load_snapshot(path: &Path) -> Result<TrainState<f32>> {
    let bytes = read_file(path)?;
    let mut r = Reader::open(path, &bytes, b"SNAP")?;
    let iteration = r.u64("iteration")? as usize;
    let params = FieldParams { theta: r.f32s("theta")?, phi: r.f32s("phi")? };
    let mut adam = |name: &str| -> Result<AdamState<f32>> {
        Ok(AdamState { t: r.u64(name)?, m: r.f32s(name)?, v: r.f32s(name)? })
    };
    let adam_theta = adam("adam_theta")?;
    let adam_phi = adam("adam_phi")?;
    r.finish()?;
    Ok(TrainState { iteration, params, adam_theta, adam_phi })
}
