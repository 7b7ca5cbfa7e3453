//! Byte-exact snapshot formats.
//!
//! Model file ("INGW"): little-endian throughout.
//!
//! ```text
//! magic        4 bytes  "INGW"
//! version      u32      1
//! levels       u32
//! table_size   u32
//! features     u32
//! base_res     u32
//! max_res      u32
//! hidden_width u32
//! bbox         6 x f32  (min xyz, max xyz)
//! dens_scale   f32
//! dens_dims    u32 n, then n x u32   (e.g. 3: in, hidden, out)
//! color_dims   u32 n, then n x u32
//! tables       levels * table_size * features x f32
//! dens layers  per layer: weights row-major (out*in x f32), bias (out x f32)
//! color layers same
//! ```
//!
//! Grid file ("INGO"):
//!
//! ```text
//! magic      4 bytes  "INGO"
//! version    u32      1
//! resolution u32      R
//! bbox       6 x f32
//! occupancy  R^3 bits, little-endian bit order, x fastest
//! prior mask R^3 bits, same layout
//! cache      R^3 x f32
//! ```

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::field::{FieldConfig, RadianceField};
use crate::geom::Aabb;
use crate::hashgrid::{FeatureTables, HashGridConfig};
use crate::nn::{Activation, Layer, Mlp};
use crate::occupancy::{BitGrid, OccupancyGrid};
use crate::render::DensityScaleConfig;

pub const MODEL_MAGIC: &[u8; 4] = b"INGW";
pub const GRID_MAGIC: &[u8; 4] = b"INGO";
pub const SNAPSHOT_VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            message: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(self.err(format!(
                "truncated snapshot: needed {n} bytes, {} remain",
                self.data.len() - self.pos
            )));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.err(format!(
                "{} trailing bytes after snapshot payload",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn bbox_to_writer(w: &mut Writer, bbox: &Aabb) {
    for v in bbox.min {
        w.f32(v);
    }
    for v in bbox.max {
        w.f32(v);
    }
}

fn bbox_from_reader(r: &mut Reader) -> Result<Aabb> {
    let min = [r.f32()?, r.f32()?, r.f32()?];
    let max = [r.f32()?, r.f32()?, r.f32()?];
    Aabb::new(min, max)
}

fn mlp_dims(mlp: &Mlp) -> Vec<u32> {
    let mut dims = vec![mlp.input_dim() as u32];
    for l in mlp.layers() {
        dims.push(l.w.nrows() as u32);
    }
    dims
}

pub fn model_to_bytes(field: &RadianceField) -> Vec<u8> {
    let cfg = field.config();
    let mut w = Writer::new();
    w.bytes(MODEL_MAGIC);
    w.u32(SNAPSHOT_VERSION);
    w.u32(cfg.hash.levels as u32);
    w.u32(cfg.hash.table_size as u32);
    w.u32(cfg.hash.features as u32);
    w.u32(cfg.hash.base_resolution);
    w.u32(cfg.hash.max_resolution);
    w.u32(cfg.hidden_width as u32);
    bbox_to_writer(&mut w, &cfg.hash.bbox);
    w.f32(cfg.density_scale.scale);
    for mlp in [field.density_head(), field.color_head()] {
        let dims = mlp_dims(mlp);
        w.u32(dims.len() as u32);
        for d in dims {
            w.u32(d);
        }
    }
    w.f32s(field.tables().data());
    for mlp in [field.density_head(), field.color_head()] {
        for layer in mlp.layers() {
            w.f32s(layer.w.as_slice().expect("contiguous"));
            w.f32s(layer.b.as_slice().expect("contiguous"));
        }
    }
    w.buf
}

pub fn model_from_bytes(data: &[u8]) -> Result<RadianceField> {
    let mut r = Reader::new(data);
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad model magic (expected INGW)".into(),
        });
    }
    let version = r.u32()?;
    if version != SNAPSHOT_VERSION {
        return Err(r.err(format!("unsupported model snapshot version {version}")));
    }
    let levels = r.u32()? as usize;
    let table_size = r.u32()? as usize;
    let features = r.u32()? as usize;
    let base_resolution = r.u32()?;
    let max_resolution = r.u32()?;
    let hidden_width = r.u32()? as usize;
    let bbox = bbox_from_reader(&mut r)?;
    let scale = r.f32()?;

    let mut read_dims = || -> Result<Vec<usize>> {
        let n = r.u32()? as usize;
        if !(2..=16).contains(&n) {
            return Err(Error::Parse {
                offset: 0,
                message: format!("implausible mlp dim count {n}"),
            });
        }
        (0..n).map(|_| Ok(r.u32()? as usize)).collect()
    };
    let dens_dims = read_dims()?;
    let color_dims = read_dims()?;

    let hash = HashGridConfig {
        levels,
        table_size,
        features,
        base_resolution,
        max_resolution,
        bbox,
    };
    let config = FieldConfig {
        hash,
        hidden_width,
        density_scale: DensityScaleConfig { scale },
    };
    config.validate().map_err(|e| Error::Parse {
        offset: 0,
        message: format!("snapshot header invalid: {e}"),
    })?;

    let tables = FeatureTables::from_data(&hash, r.f32s(levels * table_size * features)?)?;

    let mut read_mlp = |dims: &[usize], act: Activation| -> Result<Mlp> {
        let mut layers = Vec::new();
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let wv = r.f32s(fan_out * fan_in)?;
            let bv = r.f32s(fan_out)?;
            layers.push(Layer {
                w: Array2::from_shape_vec((fan_out, fan_in), wv).expect("shape"),
                b: Array1::from_vec(bv),
            });
        }
        Mlp::from_layers(layers, act)
    };
    let density_head = read_mlp(&dens_dims, Activation::ExpScaled { scale })?;
    let color_head = read_mlp(&color_dims, Activation::Sigmoid)?;
    r.done()?;
    RadianceField::from_parts(config, tables, density_head, color_head)
}

pub fn save_model(field: &RadianceField, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(field)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<RadianceField> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&data)
}

pub fn grid_to_bytes(grid: &OccupancyGrid) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(GRID_MAGIC);
    w.u32(SNAPSHOT_VERSION);
    w.u32(grid.resolution() as u32);
    bbox_to_writer(&mut w, &grid.bbox());
    w.bytes(grid.bits().bytes());
    w.bytes(grid.prior_mask().bytes());
    w.f32s(grid.cache());
    w.buf
}

pub fn grid_from_bytes(data: &[u8]) -> Result<OccupancyGrid> {
    let mut r = Reader::new(data);
    if r.take(4)? != GRID_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad grid magic (expected INGO)".into(),
        });
    }
    let version = r.u32()?;
    if version != SNAPSHOT_VERSION {
        return Err(r.err(format!("unsupported grid snapshot version {version}")));
    }
    let res = r.u32()? as usize;
    let bbox = bbox_from_reader(&mut r)?;
    let n = res * res * res;
    let nbytes = n.div_ceil(8);
    let bits = BitGrid::from_bytes(r.take(nbytes)?.to_vec(), n)?;
    let prior = BitGrid::from_bytes(r.take(nbytes)?.to_vec(), n)?;
    let cache = r.f32s(n)?;
    r.done()?;
    OccupancyGrid::from_parts(res, bbox, bits, prior, cache)
}

pub fn save_grid(grid: &OccupancyGrid, path: &Path) -> Result<()> {
    std::fs::write(path, grid_to_bytes(grid)).map_err(|e| Error::io(path, e))
}

pub fn load_grid(path: &Path) -> Result<OccupancyGrid> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    grid_from_bytes(&data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_field() -> RadianceField {
        let mut hash = HashGridConfig::toy(Aabb::unit());
        hash.levels = 3;
        hash.table_size = 1 << 9;
        hash.max_resolution = 64;
        let cfg = FieldConfig {
            hash,
            hidden_width: 8,
            density_scale: DensityScaleConfig { scale: 25.0 },
        };
        RadianceField::new(cfg, 77).unwrap()
    }

    #[test]
    fn model_roundtrip_is_bit_exact() {
        let field = tiny_field();
        let bytes = model_to_bytes(&field);
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(field.config(), back.config());
        assert_eq!(field.tables().data(), back.tables().data());
        // Same bytes again: serialization is a pure function of the model.
        assert_eq!(bytes, model_to_bytes(&back));
        // Behavior identical.
        let pts = vec![Vector3::new(0.2, -0.1, 0.05), Vector3::new(-0.4, 0.3, 0.2)];
        let a = field.forward_no_tape(&pts);
        let b = back.forward_no_tape(&pts);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn model_header_layout_is_stable() {
        let field = tiny_field();
        let bytes = model_to_bytes(&field);
        assert_eq!(&bytes[0..4], b"INGW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3, "levels");
        assert_eq!(
            u32::from_le_bytes(bytes[12..16].try_into().unwrap()),
            1 << 9,
            "table size"
        );
    }

    #[test]
    fn grid_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut grid = OccupancyGrid::empty(16, Aabb::unit()).unwrap();
        for _ in 0..300 {
            let c = [
                rng.gen_range(0..16usize),
                rng.gen_range(0..16usize),
                rng.gen_range(0..16usize),
            ];
            if rng.gen::<bool>() {
                grid.set_prior_cell(c);
            } else {
                grid.set_cell(c, true);
            }
        }
        let bytes = grid_to_bytes(&grid);
        let back = grid_from_bytes(&bytes).unwrap();
        assert_eq!(grid.bits(), back.bits());
        assert_eq!(grid.prior_mask(), back.prior_mask());
        assert_eq!(grid.cache(), back.cache());
        assert_eq!(bytes, grid_to_bytes(&back));
    }

    #[test]
    fn grid_bit_order_is_little_endian_x_fastest() {
        let mut grid = OccupancyGrid::empty(4, Aabb::unit()).unwrap();
        grid.set_cell([1, 0, 0], true); // linear index 1 -> byte 0, bit 1
        grid.set_cell([0, 1, 0], true); // linear index 4 -> byte 0, bit 4
        grid.set_cell([0, 0, 1], true); // linear index 16 -> byte 2, bit 0
        let bytes = grid_to_bytes(&grid);
        let header = 4 + 4 + 4 + 24;
        assert_eq!(bytes[header], 0b0001_0010);
        assert_eq!(bytes[header + 2], 0b0000_0001);
    }

    #[test]
    fn truncated_and_corrupt_snapshots_are_rejected() {
        let field = tiny_field();
        let mut bytes = model_to_bytes(&field);
        bytes.truncate(bytes.len() - 5);
        assert!(matches!(model_from_bytes(&bytes), Err(Error::Parse { .. })));

        let grid = OccupancyGrid::empty(4, Aabb::unit()).unwrap();
        let mut gb = grid_to_bytes(&grid);
        gb[0] = b'X';
        assert!(matches!(grid_from_bytes(&gb), Err(Error::Parse { .. })));
    }
}
