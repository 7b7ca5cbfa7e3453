//! Multi-resolution hash-grid positional encoding.
//!
//! A 3D point maps to one feature vector per level via trilinear
//! interpolation over hashed lattice vertices; the per-level vectors are
//! concatenated. Coarse levels whose dense vertex count fits in the table are
//! addressed directly (collision-free); finer levels hash.
//!
//! `encode` is read-only over the tables and safe to call concurrently.
//! `scatter_gradients` accumulates additively; callers that parallelize keep
//! per-chunk buffers and merge them in a fixed order, which reproduces the
//! serial sum exactly.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Aabb;

/// Spatial-hash constants. Documented so snapshots stay portable: the
/// encoding of a saved model depends on these exact values.
pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

/// Feature tables are initialized uniformly in this band. Near-zero start so
/// early predictions are dominated by the MLP biases.
pub const FEATURE_INIT_BOUND: f32 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HashGridConfig {
    /// Level count L.
    pub levels: usize,
    /// Entries per level table (power of two).
    pub table_size: usize,
    /// Features per entry.
    pub features: usize,
    /// Coarsest level resolution (cells per axis).
    pub base_resolution: u32,
    /// Finest level resolution; the growth factor is derived from it.
    pub max_resolution: u32,
    pub bbox: Aabb,
}

impl HashGridConfig {
    /// Full-scale defaults: 16 levels, 2^19 entries, 2 features, finest
    /// resolution 2048.
    pub fn full(bbox: Aabb) -> Self {
        HashGridConfig {
            levels: 16,
            table_size: 1 << 19,
            features: 2,
            base_resolution: 16,
            max_resolution: 2048,
            bbox,
        }
    }

    /// Desk-scale preset used by the acceptance runs.
    pub fn toy(bbox: Aabb) -> Self {
        HashGridConfig {
            levels: 8,
            table_size: 1 << 14,
            features: 2,
            base_resolution: 16,
            max_resolution: 256,
            bbox,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::config("hash grid needs at least one level"));
        }
        if !self.table_size.is_power_of_two() {
            return Err(Error::config("table size must be a power of two"));
        }
        if self.features < 1 {
            return Err(Error::config("features per entry must be >= 1"));
        }
        if self.base_resolution < 2 {
            return Err(Error::config("base resolution must be >= 2"));
        }
        if self.levels > 1 && self.max_resolution <= self.base_resolution {
            return Err(Error::config(
                "max resolution must exceed base resolution (growth factor > 1)",
            ));
        }
        if !self.bbox.is_valid() {
            return Err(Error::config("invalid bounding box"));
        }
        Ok(())
    }

    /// Geometric per-level growth factor `b`.
    pub fn growth_factor(&self) -> f64 {
        if self.levels <= 1 {
            return 1.0;
        }
        (((self.max_resolution as f64).ln() - (self.base_resolution as f64).ln())
            / (self.levels as f64 - 1.0))
            .exp()
    }

    pub fn level_resolution(&self, level: usize) -> u32 {
        let b = self.growth_factor();
        (self.base_resolution as f64 * b.powi(level as i32)).round() as u32
    }

    /// Width of the encoded output: L * F.
    pub fn output_dim(&self) -> usize {
        self.levels * self.features
    }

    fn level_stride(&self) -> usize {
        self.table_size * self.features
    }
}

/// Lattice-vertex to table-index map for one level.
///
/// Dense levels ((res+1)^3 <= T) use row-major direct addressing with x
/// fastest, which is injective; finer levels hash with [`HASH_PRIMES`] and
/// mask by T-1.
pub fn hash_index(level_resolution: u32, vertex: [u32; 3], table_size: usize) -> u32 {
    let verts_per_axis = level_resolution as u64 + 1;
    let dense = verts_per_axis * verts_per_axis * verts_per_axis;
    if dense <= table_size as u64 {
        vertex[0] + verts_per_axis as u32 * (vertex[1] + verts_per_axis as u32 * vertex[2])
    } else {
        let h = vertex[0]
            .wrapping_mul(HASH_PRIMES[0])
            ^ vertex[1].wrapping_mul(HASH_PRIMES[1])
            ^ vertex[2].wrapping_mul(HASH_PRIMES[2]);
        h & (table_size as u32 - 1)
    }
}

/// One interpolation corner: table entry index (within the level) and its
/// trilinear weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerRef {
    pub index: u32,
    pub weight: f32,
}

/// Interpolation footprint of one encoded point: 8 corners per level, in
/// level-major order. Everything `scatter_gradients` needs for backward.
pub type Footprint = Vec<[CornerRef; 8]>;

/// The learnable per-level feature tables, stored flat (level-major, then
/// entry, then feature) so the optimizer and snapshots see one contiguous
/// array.
#[derive(Debug, Clone)]
pub struct FeatureTables {
    data: Vec<f32>,
    levels: usize,
    table_size: usize,
    features: usize,
}

impl FeatureTables {
    pub fn new(cfg: &HashGridConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = cfg.levels * cfg.level_stride();
        let data = (0..len)
            .map(|_| rng.gen_range(-FEATURE_INIT_BOUND..=FEATURE_INIT_BOUND))
            .collect();
        Ok(FeatureTables {
            data,
            levels: cfg.levels,
            table_size: cfg.table_size,
            features: cfg.features,
        })
    }

    pub fn zeros(cfg: &HashGridConfig) -> Result<Self> {
        let mut t = Self::new(cfg, 0)?;
        t.data.fill(0.0);
        Ok(t)
    }

    pub fn from_data(cfg: &HashGridConfig, data: Vec<f32>) -> Result<Self> {
        cfg.validate()?;
        let expect = cfg.levels * cfg.level_stride();
        if data.len() != expect {
            return Err(Error::config(format!(
                "feature table payload has {} values, expected {}",
                data.len(),
                expect
            )));
        }
        Ok(FeatureTables {
            data,
            levels: cfg.levels,
            table_size: cfg.table_size,
            features: cfg.features,
        })
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn entry(&self, level: usize, index: u32) -> &[f32] {
        let base = (level * self.table_size + index as usize) * self.features;
        &self.data[base..base + self.features]
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn features(&self) -> usize {
        self.features
    }
}

/// Precomputed level geometry for an encoding configuration.
#[derive(Debug, Clone)]
pub struct HashEncoder {
    cfg: HashGridConfig,
    level_res: Vec<u32>,
}

impl HashEncoder {
    pub fn new(cfg: HashGridConfig) -> Result<Self> {
        cfg.validate()?;
        let level_res = (0..cfg.levels).map(|l| cfg.level_resolution(l)).collect();
        Ok(HashEncoder { cfg, level_res })
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.cfg
    }

    pub fn level_resolutions(&self) -> &[u32] {
        &self.level_res
    }

    pub fn output_dim(&self) -> usize {
        self.cfg.output_dim()
    }

    /// Encode a point that is inside the bounding box. Out-of-box points are
    /// a caller contract violation and are reported, never clamped.
    pub fn encode(
        &self,
        tables: &FeatureTables,
        point: &Vector3<f32>,
    ) -> Result<(Vec<f32>, Footprint)> {
        if !self.cfg.bbox.contains(point) {
            return Err(Error::usage(format!(
                "encode called with point {:?} outside bounding box {:?}",
                point, self.cfg.bbox
            )));
        }
        let mut feat = vec![0.0f32; self.output_dim()];
        let mut fp = vec![[CornerRef { index: 0, weight: 0.0 }; 8]; self.cfg.levels];
        self.encode_unchecked(tables, point, &mut feat, &mut fp);
        Ok((feat, fp))
    }

    /// Hot-path encode into caller buffers. The point must be inside the box
    /// (ray marching and grid probes construct in-box positions).
    pub fn encode_unchecked(
        &self,
        tables: &FeatureTables,
        point: &Vector3<f32>,
        out_features: &mut [f32],
        out_footprint: &mut [[CornerRef; 8]],
    ) {
        debug_assert_eq!(out_features.len(), self.output_dim());
        debug_assert_eq!(out_footprint.len(), self.cfg.levels);
        let u = self.cfg.bbox.normalize(point);
        let f = self.cfg.features;
        for (l, &res) in self.level_res.iter().enumerate() {
            let mut cell = [0u32; 3];
            let mut frac = [0f32; 3];
            for a in 0..3 {
                let s = u[a] * res as f32;
                let c = (s.floor() as i64).clamp(0, res as i64 - 1) as u32;
                cell[a] = c;
                frac[a] = s - c as f32;
            }
            let out = &mut out_features[l * f..(l + 1) * f];
            out.fill(0.0);
            for (ci, corner) in CORNER_OFFSETS.iter().enumerate() {
                let vx = [
                    cell[0] + corner[0],
                    cell[1] + corner[1],
                    cell[2] + corner[2],
                ];
                let w = (0..3)
                    .map(|a| if corner[a] == 1 { frac[a] } else { 1.0 - frac[a] })
                    .product::<f32>();
                let idx = hash_index(res, vx, self.cfg.table_size);
                out_footprint[l][ci] = CornerRef { index: idx, weight: w };
                let e = tables.entry(l, idx);
                for (o, &ev) in out.iter_mut().zip(e) {
                    *o += w * ev;
                }
            }
        }
    }

    /// Scatter upstream feature gradients back through the footprint:
    /// each of the 8 corners per level receives `weight * upstream`.
    pub fn scatter_gradients(
        &self,
        footprint: &[[CornerRef; 8]],
        upstream: &[f32],
        grad_buffer: &mut [f32],
    ) {
        debug_assert_eq!(upstream.len(), self.output_dim());
        debug_assert_eq!(grad_buffer.len(), self.cfg.levels * self.cfg.level_stride());
        let f = self.cfg.features;
        let stride = self.cfg.level_stride();
        for (l, corners) in footprint.iter().enumerate() {
            let up = &upstream[l * f..(l + 1) * f];
            for c in corners {
                let base = l * stride + c.index as usize * f;
                for (k, &u) in up.iter().enumerate() {
                    grad_buffer[base + k] += c.weight * u;
                }
            }
        }
    }
}

const CORNER_OFFSETS: [[u32; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];
